"""Domain exceptions raised by the reconstruction engine."""

from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from gpsdf.core.geometry import Pose


class GpsError(Exception):
    """Base class for every error the engine raises on purpose."""


class ConfigError(GpsError):
    """Raised when a configuration or scene description file cannot be used."""

    def __init__(self, message: str, path: Path | str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class DatasetError(GpsError):
    """Raised when a dataset cannot be read."""

    def __init__(self, message: str, path: Path | str | None = None):
        self.path = path
        super().__init__(f"{message} ({path})" if path is not None else message)


class ExportError(GpsError):
    """Raised when an output artifact cannot be written."""

    def __init__(self, message: str, path: Path | str):
        self.path = path
        super().__init__(f"{message} ({path})")


class BlockBudgetExceededError(GpsError):
    """Raised when allocation would exceed the configured voxel block budget."""

    def __init__(self, budget: int, requested: int):
        self.budget = budget
        self.requested = requested
        super().__init__(
            f"Voxel block budget of {budget} blocks exceeded ({requested} required)"
        )


class DegenerateGeometryError(GpsError):
    """Raised when the ICP normal equations are (numerically) singular."""

    def __init__(self, condition: float):
        self.condition = condition
        super().__init__(f"Degenerate geometry: condition number {condition:.3e}")


class TrackingLostError(GpsError):
    """Raised when a frame cannot be registered against the model."""

    def __init__(self, message: str, last_pose: "Pose", frame_index: int | None = None):
        self.last_pose = last_pose
        self.frame_index = frame_index
        prefix = f"Frame {frame_index}: " if frame_index is not None else ""
        super().__init__(f"{prefix}tracking lost: {message}")


class MetricError(GpsError):
    """Raised when a metric is undefined for its inputs."""
