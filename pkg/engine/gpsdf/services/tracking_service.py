"""Frame-to-model point-to-plane ICP over a depth pyramid.

Every level of the current frame is back-projected and registered against the
full-resolution raycast maps of the previous pose; correspondences come from
projective association and are gated by distance and normal angle. The pose is
updated by a left-multiplied twist, `T <- exp(xi) T`.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from gpsdf.core.camera import FramePyramid, Intrinsics
from gpsdf.core.exceptions import DegenerateGeometryError, TrackingLostError
from gpsdf.core.geometry import (
    GeometryMaps,
    Pose,
    back_project,
    compute_normals,
    project_points,
    twist_exp,
)
from gpsdf.core.logging import get_logger
from gpsdf.core.parallel import chunk_ranges, ordered_sum, parallel_map
from gpsdf.schemas.config import IcpConfig
from gpsdf.services.tsdf_volume import SdfRender

Array = NDArray[np.float64]

logger = get_logger(__name__)

MIN_CORRESPONDENCES = 6
# Correspondences per accumulation group
SYSTEM_GROUP = 16384


@dataclass(frozen=True)
class TrackResult:
    """Outcome of registering one frame."""

    pose: Pose
    residual: float  # mean |point-to-plane distance| at the finest level (m)
    inlier_fraction: float
    converged: bool


@dataclass(frozen=True)
class Correspondences:
    """Matched world points of the current frame and model surface samples."""

    source: Array  # (N, 3) current frame points under the pose estimate
    target: Array  # (N, 3) model vertices
    normals: Array  # (N, 3) model normals

    def __len__(self) -> int:
        return len(self.source)

    def residuals(self) -> Array:
        return ((self.source - self.target) * self.normals).sum(axis=1)

    def energy(self, step: Pose | None = None) -> float:
        """Sum of squared point-to-plane residuals, optionally after moving `source`."""
        source = self.source if step is None else step.apply(self.source)
        r = ((source - self.target) * self.normals).sum(axis=1)
        return float(r @ r)


def _system_part(corr: Correspondences, span: tuple[int, int]) -> tuple[Array, Array]:
    p = corr.source[span[0] : span[1]]
    n = corr.normals[span[0] : span[1]]
    r = ((p - corr.target[span[0] : span[1]]) * n).sum(axis=1)
    jacobian = np.concatenate([np.cross(p, n), n], axis=1)
    return jacobian.T @ jacobian, -jacobian.T @ r


def build_normal_equations(corr: Correspondences) -> tuple[Array, Array]:
    """Gauss-Newton system `A xi = b` of the point-to-plane energy.

    Rows are `J = [p x n, n]` for a left twist (omega, v); partial systems over
    fixed-size groups are summed in group order.
    """
    if len(corr) < MIN_CORRESPONDENCES:
        raise ValueError(
            f"need at least {MIN_CORRESPONDENCES} correspondences, got {len(corr)}"
        )
    parts = parallel_map(
        lambda span: _system_part(corr, span), chunk_ranges(len(corr), SYSTEM_GROUP)
    )
    a = ordered_sum((part[0] for part in parts), np.zeros((6, 6)))
    b = ordered_sum((part[1] for part in parts), np.zeros(6))
    return a, b


def solve_normal_equations(a: Array, b: Array, max_condition: float = 1e10) -> Array:
    """Solve the symmetric system.

    Raises:
        DegenerateGeometryError: If the condition number exceeds `max_condition`.
    """
    eigenvalues = linalg.eigvalsh(a)
    smallest, largest = float(eigenvalues[0]), float(eigenvalues[-1])
    condition = largest / smallest if smallest > 0 else float("inf")
    if not np.isfinite(condition) or condition > max_condition:
        raise DegenerateGeometryError(condition)
    return linalg.solve(a, b, assume_a="pos")


def associate(
    current: GeometryMaps,
    pose: Pose,
    model: GeometryMaps,
    model_pose: Pose,
    model_intr: Intrinsics,
    cfg: IcpConfig,
) -> Correspondences:
    """Projective data association with distance and normal-angle gates.

    `current` holds camera-frame maps of the frame being tracked, `model` holds
    world-frame maps rendered at `model_pose` with `model_intr`.
    """
    valid = current.valid
    source = pose.apply(current.vertices[valid])
    source_normals = current.normals[valid] @ pose.rotation.T

    uv, z = project_points(model_pose.inverse().apply(source), model_intr)
    with np.errstate(invalid="ignore"):
        u = np.rint(uv[:, 0])
        v = np.rint(uv[:, 1])
        inside = (z > 0) & (u >= 0) & (u < model_intr.width) & (v >= 0) & (v < model_intr.height)
    u = u[inside].astype(np.int64)
    v = v[inside].astype(np.int64)
    source = source[inside]
    source_normals = source_normals[inside]

    found = model.valid[v, u]
    target = model.vertices[v, u][found]
    target_normals = model.normals[v, u][found]
    source = source[found]
    source_normals = source_normals[found]

    close = np.linalg.norm(source - target, axis=1) <= cfg.max_distance
    aligned = (source_normals * target_normals).sum(axis=1) >= np.cos(
        np.radians(cfg.max_angle_deg)
    )
    keep = close & aligned
    return Correspondences(source[keep], target[keep], target_normals[keep])


def _level_maps(pyramid: FramePyramid) -> list[GeometryMaps]:
    return [compute_normals(back_project(frame)) for frame in pyramid.levels]


def _refine_level(
    maps: GeometryMaps,
    pose: Pose,
    model: GeometryMaps,
    model_pose: Pose,
    model_intr: Intrinsics,
    cfg: IcpConfig,
    iterations: int,
    level: int,
) -> Pose:
    for iteration in range(iterations):
        corr = associate(maps, pose, model, model_pose, model_intr, cfg)
        if len(corr) < MIN_CORRESPONDENCES:
            logger.debug(
                "Too few correspondences on level %d (%d)", level, len(corr),
                extra={"operation": "track"},
            )
            break
        try:
            a, b = build_normal_equations(corr)
            xi = solve_normal_equations(a, b, cfg.max_condition)
        except DegenerateGeometryError as e:
            logger.warning("ICP level %d: %s", level, e, extra={"operation": "track"})
            break

        energy = corr.energy()
        accepted = None
        for _ in range(cfg.max_step_halvings + 1):
            step = twist_exp(xi)
            if corr.energy(step) <= energy:
                accepted = step
                break
            xi = 0.5 * xi
        if accepted is None:
            break
        pose = accepted.compose(pose)
        if np.linalg.norm(xi) < cfg.epsilon:
            logger.debug(
                "ICP level %d converged after %d iterations", level, iteration + 1,
                extra={"operation": "track"},
            )
            break
    return pose


def track(
    current: FramePyramid,
    model: SdfRender | GeometryMaps,
    model_pose: Pose,
    init: Pose,
    cfg: IcpConfig | None = None,
) -> TrackResult:
    """Register `current` against the model maps, coarse level first.

    Args:
        current: Pyramid of the incoming frame (level 0 = full resolution).
        model: Raycast of the previous pose, or world-frame maps at full resolution.
        model_pose: Pose the model maps were rendered from.
        init: Initial estimate, normally the previous pose.
        cfg: ICP parameters.

    Raises:
        TrackingLostError: Fewer than six inliers remain at the finest level.
    """
    cfg = cfg or IcpConfig()
    model_maps = model.as_maps() if isinstance(model, SdfRender) else model
    model_intr = current[0].intrinsics
    if model_maps.shape != model_intr.shape:
        raise ValueError(
            f"model maps {model_maps.shape} do not match frame {model_intr.shape}"
        )
    levels = _level_maps(current)
    frame_index = current[0].index

    pose = init
    for level in reversed(range(len(levels))):
        pose = _refine_level(
            levels[level],
            pose,
            model_maps,
            model_pose,
            model_intr,
            cfg,
            cfg.iterations_for(level),
            level,
        )

    finest = levels[0]
    corr = associate(finest, pose, model_maps, model_pose, model_intr, cfg)
    if len(corr) < MIN_CORRESPONDENCES:
        raise TrackingLostError(
            f"{len(corr)} inliers at the finest level", last_pose=init, frame_index=frame_index
        )
    candidates = int(finest.valid.sum())
    inlier_fraction = len(corr) / candidates if candidates else 0.0
    residual = float(np.abs(corr.residuals()).mean())
    converged = inlier_fraction >= cfg.min_inlier_fraction
    if not converged:
        logger.warning(
            "Frame %d tracked with only %.1f%% inliers", frame_index, 100 * inlier_fraction,
            extra={"frame": frame_index, "operation": "track"},
        )
    return TrackResult(pose, residual, inlier_fraction, converged)
