"""Rigid transforms, twists and depth-derived geometry maps.

Poses follow the camera->world convention throughout the engine: a point in
camera coordinates `x_c` maps to world coordinates `R @ x_c + t`.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from gpsdf.core.camera import Frame, Intrinsics

Array = NDArray[np.float64]

# Rotation magnitude below which the exponential map switches to its series form
SMALL_ANGLE = 1e-8
ORTHONORMAL_TOLERANCE = 1e-6


def skew(v: Array) -> Array:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid SE(3) transform, camera->world."""

    rotation: Array = field(default_factory=lambda: np.eye(3))
    translation: Array = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            raise ValueError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise ValueError("Pose rotation must have determinant +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, matrix: Array) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_quaternion(cls, translation: Array, quaternion_xyzw: Array) -> "Pose":
        """Build a pose from a TUM-ordered (qx, qy, qz, qw) quaternion."""
        x, y, z, w = np.asarray(quaternion_xyzw, dtype=np.float64)
        return cls(quaternion_to_matrix(np.array([w, x, y, z])), translation)

    def as_matrix(self) -> Array:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def to_quaternion(self) -> Array:
        """Rotation as a TUM-ordered (qx, qy, qz, qw) unit quaternion with qw >= 0."""
        w, x, y, z = matrix_to_quaternion(self.rotation)
        return np.array([x, y, z, w])

    def compose(self, other: "Pose") -> "Pose":
        """`self @ other`: apply `other` first, then `self`."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rotation_t = self.rotation.T
        return Pose(rotation_t, -rotation_t @ self.translation)

    def apply(self, points: Array) -> Array:
        """Transform (..., 3) points."""
        return points @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Geodesic rotation angle in radians."""
        cos_angle = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))

    @property
    def center(self) -> Array:
        return self.translation


def quaternion_to_matrix(q_wxyz: Array) -> Array:
    """Rotation matrix of a (w, x, y, z) quaternion (normalized here)."""
    q = np.asarray(q_wxyz, dtype=np.float64)
    norm = np.linalg.norm(q)
    if not norm > 1e-12:
        raise ValueError("Quaternion has zero norm")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(rotation: Array) -> Array:
    """(w, x, y, z) unit quaternion of a rotation matrix, w >= 0."""
    m = rotation
    trace = np.trace(m)
    if trace > 0:
        s = np.sqrt(trace + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def twist_exp(xi: Array) -> Pose:
    """Exponential map of a twist (wx, wy, wz, vx, vy, vz) onto SE(3)."""
    xi = np.asarray(xi, dtype=np.float64)
    omega, v = xi[:3], xi[3:]
    theta = float(np.linalg.norm(omega))
    w_hat = skew(omega)
    w_hat2 = w_hat @ w_hat

    if theta < SMALL_ANGLE:
        rotation = np.eye(3) + w_hat + 0.5 * w_hat2
        left_jacobian = np.eye(3) + 0.5 * w_hat + w_hat2 / 6.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
        rotation = np.eye(3) + a * w_hat + b * w_hat2
        left_jacobian = np.eye(3) + b * w_hat + c * w_hat2

    # Re-orthonormalize so the series branch still passes the Pose checks
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return Pose(rotation, left_jacobian @ v)


def look_at(eye: Array, target: Array, up: Array = np.array([0.0, 0.0, 1.0])) -> Pose:
    """Camera->world pose of a camera at `eye` looking at `target` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("look_at: view direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)


@dataclass(frozen=True)
class GeometryMaps:
    """Per-pixel vertex and normal maps with a validity mask."""

    vertices: Array  # (H, W, 3)
    normals: Array  # (H, W, 3)
    valid: NDArray[np.bool_]  # (H, W)

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def pixel_rays(intr: Intrinsics) -> Array:
    """Camera-frame ray directions with unit z for every pixel, shape (H, W, 3)."""
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    rays = np.empty((intr.height, intr.width, 3))
    rays[..., 0] = (u - intr.cx) / intr.fx
    rays[..., 1] = (v - intr.cy) / intr.fy
    rays[..., 2] = 1.0
    return rays


def back_project(frame: Frame) -> GeometryMaps:
    """Local vertex map of a frame; invalid where depth is zero or out of range."""
    depth = frame.depth
    valid = frame.valid_depth_mask()
    vertices = pixel_rays(frame.intrinsics) * depth[..., None]
    vertices[~valid] = 0.0
    normals = np.zeros_like(vertices)
    return GeometryMaps(vertices, normals, valid)


def compute_normals(maps: GeometryMaps) -> GeometryMaps:
    """Normals from central differences, oriented toward the camera."""
    vertices, valid = maps.vertices, maps.valid
    normals = np.zeros_like(vertices)
    normal_valid = np.zeros_like(valid)

    inner = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    dx = vertices[1:-1, 2:] - vertices[1:-1, :-2]
    dy = vertices[2:, 1:-1] - vertices[:-2, 1:-1]
    n = np.cross(dy, dx)
    length = np.linalg.norm(n, axis=-1)
    inner &= length > 0
    n[inner] /= length[inner][:, None]
    n[~inner] = 0.0

    normals[1:-1, 1:-1] = n
    normal_valid[1:-1, 1:-1] = inner
    return GeometryMaps(vertices, normals, normal_valid)


def transform_maps(maps: GeometryMaps, pose: Pose) -> GeometryMaps:
    """Rotate+translate vertices, rotate normals; invalid pixels stay zero."""
    vertices = pose.apply(maps.vertices)
    normals = maps.normals @ pose.rotation.T
    vertices[~maps.valid] = 0.0
    normals[~maps.valid] = 0.0
    return GeometryMaps(vertices, normals, maps.valid.copy())


def project_points(points: Array, intr: Intrinsics) -> tuple[Array, Array]:
    """Pinhole projection of camera-frame points; returns (..., 2) pixels and (...) depth."""
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * points[..., 0] / z + intr.cx
        v = intr.fy * points[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z
