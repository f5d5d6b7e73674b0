"""Online RGB-D reconstruction: TSDF geometry with appearance-correcting Gaussians."""

__version__ = "0.1.0"
