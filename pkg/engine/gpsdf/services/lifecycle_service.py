"""Gaussian population control and keyframe bookkeeping.

New Gaussians are seeded where the composite still disagrees with the input
image and few Gaussians cover the pixel. Each one starts as a thin disc lying in
the surface: two equal in-plane scales from the spacing of its masked
neighbours, a tenth of that along the surface normal.
"""

import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from gpsdf.core.camera import Intrinsics
from gpsdf.core.geometry import Pose
from gpsdf.core.logging import LoggerMixin
from gpsdf.schemas.config import LifecycleConfig
from gpsdf.services.gaussians import GaussianSet
from gpsdf.services.tsdf_volume import SdfRender, TsdfVolume

Array = NDArray[np.float64]
Mask = NDArray[np.bool_]

NEIGHBOURS = 3
DISC_THICKNESS = 0.1


@dataclass(frozen=True)
class Keyframe:
    """A stored view: pose, target image and its (possibly cached) SDF render."""

    pose: Pose
    rgb: Array  # (H, W, 3)
    index: int
    render: SdfRender | None = None
    valid: Mask | None = None  # depth-valid pixels of the input frame


def add_mask(
    composite: Array,
    target: Array,
    weight: Array,
    hit: Mask,
    cfg: LifecycleConfig | None = None,
) -> Mask:
    """SDF-hit pixels with max-channel color error above the threshold and low W_G."""
    cfg = cfg or LifecycleConfig()
    error = np.abs(composite - target).max(axis=-1)
    return hit & (error > cfg.color_threshold) & (weight < cfg.weight_threshold)


def stratified_sample(mask: Mask, fraction: float, rng: np.random.Generator) -> NDArray[np.intp]:
    """Flat indices of exactly ceil(fraction * |mask|) masked pixels.

    Pixels are drawn round-robin over 2x2 cells: every cell gives up one random
    pixel before any cell gives up a second.
    """
    flat = np.flatnonzero(mask)
    count = math.ceil(fraction * len(flat))
    if count == 0:
        return flat[:0]
    width = mask.shape[1]
    v, u = np.divmod(flat, width)
    cells = (v // 2) * ((width + 1) // 2) + u // 2

    shuffle = rng.permutation(len(flat))
    by_cell = shuffle[np.argsort(cells[shuffle], kind="stable")]
    sorted_cells = cells[by_cell]
    starts = np.flatnonzero(np.r_[True, sorted_cells[1:] != sorted_cells[:-1]])
    first = np.repeat(starts, np.diff(np.r_[starts, len(by_cell)]))
    rank = np.arange(len(by_cell)) - first

    order = by_cell[np.lexsort((rng.random(len(by_cell)), rank))]
    return np.sort(flat[order[:count]])


def neighbour_rms(samples: Array, candidates: Array, own: NDArray[np.intp]) -> Array:
    """RMS distance from each sample to its three nearest candidates.

    `own[i]` is the index of sample `i` within `candidates`; it is excluded.
    """
    dist, idx = cKDTree(candidates).query(samples, k=NEIGHBOURS + 1)
    others = idx != own[:, None]
    # first NEIGHBOURS columns that are not the sample itself
    keep = others & (np.cumsum(others, axis=1) <= NEIGHBOURS)
    nearest = dist[keep].reshape(len(samples), NEIGHBOURS)
    return np.sqrt((nearest**2).mean(axis=1))


def disc_rotations(normals: Array) -> Array:
    """(w, x, y, z) shortest-arc rotations taking the local z axis onto `normals`."""
    n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    q = np.stack([1.0 + n[:, 2], -n[:, 1], n[:, 0], np.zeros(len(n))], axis=1)
    flipped = q[:, 0] < 1e-9
    q[flipped] = (0.0, 1.0, 0.0, 0.0)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def spawn(
    mask: Mask,
    vertices: Array,
    normals: Array,
    colors: Array,
    cfg: LifecycleConfig,
    rng: np.random.Generator,
    voxel_size: float,
    sh_degree: int = 1,
) -> GaussianSet:
    """Seed disc-shaped Gaussians on a stratified subset of the masked pixels.

    Args:
        mask: Pixels selected by `add_mask`.
        vertices: World surface points V* (H, W, 3).
        normals: World surface normals N* (H, W, 3).
        colors: Target image C_k (H, W, 3).
        cfg: Lifecycle thresholds.
        rng: Seeded generator driving the sampler.
        voxel_size: Volume resolution; sets the fallback scale.
        sh_degree: SH degree of the new Gaussians.
    """
    chosen = stratified_sample(mask, cfg.sample_fraction, rng)
    if len(chosen) == 0:
        return GaussianSet.empty(sh_degree)

    masked = np.flatnonzero(mask)
    flat_vertices = vertices.reshape(-1, 3)
    positions = flat_vertices[chosen]

    if len(masked) > NEIGHBOURS:
        own = np.searchsorted(masked, chosen)
        rms = neighbour_rms(positions, flat_vertices[masked], own)
    else:
        rms = np.full(len(chosen), cfg.fallback_scale_voxels * voxel_size)
    in_plane = np.clip(rms, cfg.min_scale, cfg.max_init_scale)
    scales = np.stack([in_plane, in_plane, DISC_THICKNESS * in_plane], axis=1)

    return GaussianSet.create(
        positions=positions,
        scales=scales,
        rotations=disc_rotations(normals.reshape(-1, 3)[chosen]),
        opacities=np.full(len(chosen), cfg.initial_opacity),
        colors=np.clip(colors.reshape(-1, 3)[chosen], 0.0, 1.0),
        sh_degree=sh_degree,
    )


def maybe_add_keyframe(
    pose: Pose, last_keyframe_pose: Pose | None, cfg: LifecycleConfig | None = None
) -> bool:
    """True when the view moved far enough from the last keyframe."""
    cfg = cfg or LifecycleConfig()
    if last_keyframe_pose is None:
        return True
    relative = last_keyframe_pose.inverse().compose(pose)
    return (
        relative.rotation_angle() > cfg.angle_rad
        or float(np.linalg.norm(relative.translation)) > cfg.move_m
    )


class KeyframeStore(LoggerMixin):
    """Append-only keyframe history."""

    def __init__(self, config: LifecycleConfig | None = None):
        self.config = config or LifecycleConfig()
        self._keyframes: list[Keyframe] = []

    def __len__(self) -> int:
        return len(self._keyframes)

    def __iter__(self) -> Iterator[Keyframe]:
        return iter(self._keyframes)

    def __getitem__(self, index: int) -> Keyframe:
        return self._keyframes[index]

    @property
    def latest_pose(self) -> Pose | None:
        return self._keyframes[-1].pose if self._keyframes else None

    def add(self, keyframe: Keyframe) -> None:
        self._keyframes.append(keyframe)

    def consider(self, keyframe: Keyframe) -> bool:
        """Store `keyframe` if it passes the motion test; returns whether it did."""
        if not maybe_add_keyframe(keyframe.pose, self.latest_pose, self.config):
            return False
        self.add(keyframe)
        self.logger.debug(
            "Keyframe %d added (%d total)", keyframe.index, len(self),
            extra={"frame": keyframe.index},
        )
        return True


def local_indices(count: int, n_local: int) -> list[int]:
    """Indices at a stride of count // n_local within an interval of `count` frames."""
    stride = max(count // n_local, 1)
    return [stride * (i + 1) - 1 for i in range(min(n_local, count))]


def select_views(
    keyframes: Sequence[Keyframe],
    recent: Sequence[Keyframe],
    cfg: LifecycleConfig,
    rng: np.random.Generator,
) -> list[Keyframe]:
    """Random global keyframes plus evenly spaced frames of the current interval.

    Global picks whose frame also appears among the local picks are dropped.
    """
    if not recent:
        raise ValueError("select_views needs at least one recent frame")
    local = [recent[i] for i in local_indices(len(recent), cfg.n_local)]
    taken = {view.index for view in local}

    pool = [kf for kf in keyframes if kf.index not in taken]
    n_global = min(cfg.n_global, len(pool))
    picks = np.sort(rng.choice(len(pool), size=n_global, replace=False)) if n_global else []
    return [pool[int(i)] for i in picks] + local


def refresh_views(
    views: Sequence[Keyframe], volume: TsdfVolume, intr: Intrinsics
) -> list[Keyframe]:
    """Replace each view's cached render by a raycast of the latest volume."""
    return [replace(view, render=volume.raycast(view.pose, intr)) for view in views]


def remove(gaussians: GaussianSet, cfg: LifecycleConfig | None = None) -> tuple[GaussianSet, int, Mask]:
    """Drop nearly transparent, oversized and undersized Gaussians.

    Returns:
        The retained set (original order), the removal count and the keep mask.
    """
    cfg = cfg or LifecycleConfig()
    largest = gaussians.scales.max(axis=1, initial=0.0)
    drop = (
        (gaussians.opacity < cfg.min_opacity)
        | (largest > cfg.max_scale)
        | (largest < cfg.min_scale)
    )
    keep = ~drop
    return gaussians.select(keep), int(drop.sum()), keep
