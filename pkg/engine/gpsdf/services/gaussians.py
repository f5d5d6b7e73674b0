"""Gaussian set container, gradient container and the GPSF binary format.

Parameters are stored in their optimization domain: log-scales, raw
(pre-sigmoid) opacity and unnormalized (w, x, y, z) quaternions.
"""

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from gpsdf.core.exceptions import DatasetError, ExportError
from gpsdf.services import sh_basis

Array = NDArray[np.float64]

GPSF_MAGIC = b"GPSF"
GPSF_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
# position, log-scale, quaternion, raw opacity
_FIXED_FLOATS = 3 + 3 + 4 + 1


def quaternion_matrices(q: Array) -> Array:
    """Rotation matrices (N, 3, 3) of unit (w, x, y, z) quaternions (N, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((len(q), 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian list."""

    positions: Array  # (N, 3) world, meters
    log_scales: Array  # (N, 3)
    rotations: Array  # (N, 4) w, x, y, z
    raw_opacity: Array  # (N,)
    sh: Array  # (N, K, 3)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.raw_opacity = np.asarray(self.raw_opacity, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[2] != 3:
            raise ValueError(f"sh must have shape ({n}, K, 3), got {self.sh.shape}")
        sh_basis.degree_of(self.sh.shape[1])

    @classmethod
    def empty(cls, sh_degree: int = 1) -> "GaussianSet":
        k = sh_basis.coefficient_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def create(
        cls,
        positions: Array,
        scales: Array,
        rotations: Array,
        opacities: Array,
        colors: Array,
        sh_degree: int = 1,
    ) -> "GaussianSet":
        """Build a set from activated values; higher-order SH start at zero."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        sh = np.zeros((n, sh_basis.coefficient_count(sh_degree), 3))
        sh[:, 0] = sh_basis.rgb_to_sh0(np.asarray(colors, dtype=np.float64).reshape(n, 3))
        return cls(
            positions,
            np.log(np.asarray(scales, dtype=np.float64).reshape(n, 3)),
            rotations,
            logit(np.asarray(opacities, dtype=np.float64).reshape(n)),
            sh,
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def sh_degree(self) -> int:
        return sh_basis.degree_of(self.sh.shape[1])

    @property
    def opacity(self) -> Array:
        return expit(self.raw_opacity)

    @property
    def scales(self) -> Array:
        return np.exp(self.log_scales)

    def unit_rotations(self) -> Array:
        return self.rotations / np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def rotation_matrices(self) -> Array:
        return quaternion_matrices(self.unit_rotations())

    def base_colors(self) -> Array:
        """View-independent (degree 0) colors."""
        return sh_basis.sh0_to_rgb(self.sh[:, 0])

    def select(self, index: NDArray[np.intp] | NDArray[np.bool_]) -> "GaussianSet":
        return GaussianSet(
            self.positions[index].copy(),
            self.log_scales[index].copy(),
            self.rotations[index].copy(),
            self.raw_opacity[index].copy(),
            self.sh[index].copy(),
        )

    def copy(self) -> "GaussianSet":
        return self.select(np.arange(len(self)))

    def concat(self, other: "GaussianSet") -> "GaussianSet":
        if other.sh.shape[1] != self.sh.shape[1]:
            raise ValueError("Cannot concatenate Gaussian sets of different SH degree")
        return GaussianSet(
            *(
                np.concatenate([getattr(self, f.name), getattr(other, f.name)])
                for f in fields(self)
            )
        )


@dataclass
class GaussianGradients:
    """Loss gradients with respect to every stored (raw) Gaussian parameter."""

    positions: Array
    log_scales: Array
    rotations: Array
    raw_opacity: Array
    sh: Array

    @classmethod
    def zeros_like(cls, gaussians: GaussianSet) -> "GaussianGradients":
        return cls(
            *(np.zeros_like(getattr(gaussians, f.name)) for f in fields(GaussianSet))
        )

    def __add__(self, other: "GaussianGradients") -> "GaussianGradients":
        return GaussianGradients(
            *(getattr(self, f.name) + getattr(other, f.name) for f in fields(self))
        )

    def scaled(self, factor: float) -> "GaussianGradients":
        return GaussianGradients(*(getattr(self, f.name) * factor for f in fields(self)))

    def max_abs(self) -> float:
        values = [np.abs(getattr(self, f.name)).max(initial=0.0) for f in fields(self)]
        return float(max(values))


def save_gaussians(gaussians: GaussianSet, path: Path | str) -> None:
    """Write the GPSF stream: 16-byte header then little-endian f32 records."""
    path = Path(path)
    n = len(gaussians)
    records = np.concatenate(
        [
            gaussians.positions,
            gaussians.log_scales,
            gaussians.rotations,
            gaussians.raw_opacity[:, None],
            gaussians.sh.reshape(n, -1),
        ],
        axis=1,
    ).astype("<f4")
    try:
        with path.open("wb") as fh:
            fh.write(_HEADER.pack(GPSF_MAGIC, GPSF_VERSION, n))
            fh.write(records.tobytes())
    except OSError as e:
        raise ExportError(f"cannot write Gaussians: {e.strerror}", path) from e


def load_gaussians(path: Path | str, sh_degree: int = 1) -> GaussianSet:
    """Read a GPSF file; the SH degree comes from the record size.

    `sh_degree` only applies to files holding zero Gaussians.

    Raises:
        DatasetError: On unreadable files, bad magic/version or truncated records.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read Gaussians: {e.strerror}", path) from e
    if len(data) < _HEADER.size:
        raise DatasetError("file too short for a GPSF header", path)
    magic, version, count = _HEADER.unpack_from(data)
    if magic != GPSF_MAGIC:
        raise DatasetError(f"bad magic {magic!r}", path)
    if version != GPSF_VERSION:
        raise DatasetError(f"unsupported GPSF version {version}", path)
    if count == 0:
        return GaussianSet.empty(sh_degree)

    payload = len(data) - _HEADER.size
    floats, remainder = divmod(payload, 4 * count)
    sh_floats = floats - _FIXED_FLOATS
    if remainder or sh_floats <= 0 or sh_floats % 3:
        raise DatasetError(f"payload of {payload} bytes does not hold {count} records", path)
    try:
        k = sh_floats // 3
        sh_basis.degree_of(k)
    except ValueError as e:
        raise DatasetError(str(e), path) from e

    records = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, floats)
    records = records.astype(np.float64)
    return GaussianSet(
        records[:, 0:3],
        records[:, 3:6],
        records[:, 6:10],
        records[:, 10],
        records[:, _FIXED_FLOATS:].reshape(count, k, 3),
    )
