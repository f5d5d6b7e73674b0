"""Camera intrinsics, RGB-D frames and frame pyramids."""

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray

# Sensor range clamp: depth outside this interval is treated as a hole
MIN_DEPTH = 0.1
MAX_DEPTH = 10.0


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; pixel (u, v) has its center at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("Focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("Image dimensions must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def matrix(self) -> NDArray[np.float64]:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def downsampled(self) -> "Intrinsics":
        """Intrinsics of a 2x2-averaged image (pixel centers stay on integers)."""
        return replace(
            self,
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=max((self.cx - 0.5) / 2.0, 0.0),
            cy=max((self.cy - 0.5) / 2.0, 0.0),
            width=self.width // 2,
            height=self.height // 2,
        )


@dataclass(frozen=True)
class Frame:
    """One RGB-D observation: rgb in [0, 1], depth in meters (0 = invalid)."""

    rgb: NDArray[np.float64]  # (H, W, 3)
    depth: NDArray[np.float64]  # (H, W)
    intrinsics: Intrinsics
    index: int = 0
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        shape = self.intrinsics.shape
        if self.rgb.shape != (*shape, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match intrinsics {shape}")
        if self.depth.shape != shape:
            raise ValueError(
                f"depth shape {self.depth.shape} does not match intrinsics {shape}"
            )
        if np.any(self.depth < 0):
            raise ValueError("Depth must be non-negative")

    def valid_depth_mask(self) -> NDArray[np.bool_]:
        return (self.depth >= MIN_DEPTH) & (self.depth <= MAX_DEPTH)


@dataclass(frozen=True)
class FramePyramid:
    """Resolution hierarchy; level 0 is the original frame."""

    levels: tuple[Frame, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> Frame:
        return self.levels[level]


def _downsample(frame: Frame) -> Frame:
    h, w = frame.intrinsics.height // 2, frame.intrinsics.width // 2

    rgb = frame.rgb.reshape(h, 2, w, 2, 3).mean(axis=(1, 3))

    depth = np.where(frame.valid_depth_mask(), frame.depth, 0.0).reshape(h, 2, w, 2)
    count = (depth > 0).sum(axis=(1, 3))
    total = depth.sum(axis=(1, 3))
    coarse = np.divide(total, count, out=np.zeros((h, w)), where=count > 0)

    return Frame(
        rgb=rgb,
        depth=coarse,
        intrinsics=frame.intrinsics.downsampled(),
        index=frame.index,
        timestamp=frame.timestamp,
    )


def build_pyramid(frame: Frame, levels: int) -> FramePyramid:
    """Halve resolution `levels - 1` times with validity-aware depth averaging."""
    if levels < 1:
        raise ValueError("Pyramid needs at least one level")
    factor = 2 ** (levels - 1)
    if frame.intrinsics.width % factor or frame.intrinsics.height % factor:
        raise ValueError(
            f"Image {frame.intrinsics.width}x{frame.intrinsics.height} "
            f"is not divisible by {factor} for {levels} levels"
        )

    pyramid = [frame]
    for _ in range(levels - 1):
        pyramid.append(_downsample(pyramid[-1]))
    return FramePyramid(tuple(pyramid))
