"""Image, trajectory and geometry metrics."""

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from gpsdf.core.camera import Intrinsics
from gpsdf.core.exceptions import MetricError
from gpsdf.core.geometry import Pose, project_points
from gpsdf.services.tsdf_volume import TriangleMesh

Array = NDArray[np.float64]
Mask = NDArray[np.bool_]
SurfaceSampler = Callable[[int, np.random.Generator], Array]

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
GEOMETRY_THRESHOLD = 0.03
GEOMETRY_SAMPLES = 10_000


def _full_mask(a: Array, mask: Mask | None) -> Mask:
    if mask is None:
        return np.ones(a.shape[:2], dtype=bool)
    if mask.shape != a.shape[:2]:
        raise MetricError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    return mask


def _check_pair(a: Array, b: Array) -> None:
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a: Array, b: Array, mask: Mask | None = None, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio of [0, 1] images over masked pixels (capped)."""
    _check_pair(a, b)
    mask = _full_mask(a, mask)
    if not mask.any():
        raise MetricError("PSNR of an empty mask")
    diff = np.asarray(a, dtype=np.float64)[mask] - np.asarray(b, dtype=np.float64)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


def ssim(a: Array, b: Array, mask: Mask | None = None) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5), mean over masked pixels."""
    _check_pair(a, b)
    mask = _full_mask(a, mask)
    if not mask.any():
        raise MetricError("SSIM of an empty mask")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs images of at least {SSIM_WINDOW} pixels per side")
    _, ssim_map = structural_similarity(
        np.asarray(a, dtype=np.float64),
        np.asarray(b, dtype=np.float64),
        data_range=1.0,
        channel_axis=-1 if a.ndim == 3 else None,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        full=True,
    )
    if ssim_map.ndim == 3:
        ssim_map = ssim_map.mean(axis=-1)
    return float(ssim_map[mask].mean())


def _positions(trajectory: Sequence[Pose] | Array) -> Array:
    if isinstance(trajectory, np.ndarray):
        return np.asarray(trajectory, dtype=np.float64).reshape(-1, 3)
    return np.array([pose.translation for pose in trajectory]).reshape(-1, 3)


def align_rigid(estimated: Array, truth: Array) -> tuple[Array, Array]:
    """Least-squares rotation and translation taking `estimated` onto `truth` (no scale)."""
    mu_e = estimated.mean(axis=0)
    mu_t = truth.mean(axis=0)
    covariance = (truth - mu_t).T @ (estimated - mu_e)
    u, _, vt = np.linalg.svd(covariance)
    correction = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        correction[2, 2] = -1.0
    rotation = u @ correction @ vt
    return rotation, mu_t - rotation @ mu_e


def ate_rmse(estimated: Sequence[Pose] | Array, truth: Sequence[Pose] | Array) -> float:
    """Absolute trajectory error after rigid alignment.

    Raises:
        MetricError: On length mismatch or fewer than two poses.
    """
    est = _positions(estimated)
    ref = _positions(truth)
    if len(est) != len(ref):
        raise MetricError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    if len(est) < 2:
        raise MetricError("ATE needs at least two poses")
    rotation, translation = align_rigid(est, ref)
    residual = est @ rotation.T + translation - ref
    return float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> Array:
    """`n` area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        return np.zeros((0, 3))
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[faces, i]] for i in range(3))
    return (
        (1.0 - r1)[:, None] * a
        + (r1 * (1.0 - r2))[:, None] * b
        + (r1 * r2)[:, None] * c
    )


def frustum_filter(
    points: Array,
    poses: Sequence[Pose],
    intr: Intrinsics,
    depth_maps: Sequence[Array] | None = None,
    tolerance: float = GEOMETRY_THRESHOLD,
) -> Mask:
    """Points inside at least one camera frustum.

    With `depth_maps`, a point also has to lie no further than `tolerance`
    behind the observed depth of the pixel it projects to.
    """
    seen = np.zeros(len(points), dtype=bool)
    for i, pose in enumerate(poses):
        uv, z = project_points(pose.inverse().apply(points), intr)
        with np.errstate(invalid="ignore"):
            u = np.rint(uv[:, 0])
            v = np.rint(uv[:, 1])
            inside = (z > 0) & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
        if depth_maps is not None:
            depth = depth_maps[i]
            rows = v[inside].astype(np.int64)
            cols = u[inside].astype(np.int64)
            observed = depth[rows, cols]
            inside[inside] = (observed > 0) & (z[inside] <= observed + tolerance)
        seen |= inside
    return seen


@dataclass(frozen=True)
class GeometryScores:
    accuracy: float
    completion: float
    accuracy_ratio: float
    completion_ratio: float


def geometry_ratios(
    mesh: TriangleMesh,
    reference: SurfaceSampler,
    threshold: float = GEOMETRY_THRESHOLD,
    samples: int = GEOMETRY_SAMPLES,
    seed: int = 0,
    keep: Callable[[Array], Mask] | None = None,
) -> GeometryScores:
    """Accuracy and completion between mesh samples and reference samples.

    Both sides are drawn with generators seeded by `seed`. `keep` (for example
    a bound `frustum_filter`) drops unseen samples on both sides.

    Raises:
        MetricError: If either side is empty after filtering.
    """
    predicted = sample_mesh_surface(mesh, samples, np.random.default_rng(seed))
    truth = reference(samples, np.random.default_rng(seed))
    if keep is not None:
        predicted = predicted[keep(predicted)] if len(predicted) else predicted
        truth = truth[keep(truth)] if len(truth) else truth
    if len(predicted) == 0 or len(truth) == 0:
        raise MetricError("geometry metrics need non-empty point sets")

    accuracy, _ = cKDTree(truth).query(predicted)
    completion, _ = cKDTree(predicted).query(truth)
    return GeometryScores(
        accuracy=float(accuracy.mean()),
        completion=float(completion.mean()),
        accuracy_ratio=float((accuracy < threshold).mean()),
        completion_ratio=float((completion < threshold).mean()),
    )


def mesh_sampler(mesh: TriangleMesh) -> SurfaceSampler:
    """Reference sampler drawing from another mesh."""
    return lambda n, rng: sample_mesh_surface(mesh, n, rng)


def image_scores(
    pairs: Sequence[tuple[Array, Array, Mask | None]],
) -> tuple[float, float]:
    """Per-frame PSNR and SSIM averaged over the frames."""
    if not pairs:
        raise MetricError("no images to score")
    psnrs = [psnr(a, b, mask) for a, b, mask in pairs]
    ssims = [ssim(a, b, mask) for a, b, mask in pairs]
    return float(np.mean(psnrs)), float(np.mean(ssims))
