"""Sort-free, depth-culled Gaussian splatting with an analytic backward pass.

Every (Gaussian, pixel) pair inside a splat's 3-sigma footprint adds
`alpha * color` and `alpha` into per-pixel sums; no ordering is involved, so the
result does not depend on the order of the Gaussian list. The flattened pair
sequence is cut into fixed-size work groups that run on the shared pool, and
partial sums are reduced in group order.

The composite with the SDF render is `C* = (C_t + C_G) / (1 + W_G)`.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from gpsdf.core.camera import Intrinsics
from gpsdf.core.geometry import Pose
from gpsdf.core.parallel import chunk_ranges, parallel_map
from gpsdf.schemas.config import RenderConfig
from gpsdf.services import sh_basis
from gpsdf.services.gaussians import GaussianGradients, GaussianSet, quaternion_matrices
from gpsdf.services.tsdf_volume import SdfRender, TsdfVolume

Array = NDArray[np.float64]
IntArray = NDArray[np.int64]

# Work groups handed to one pool task
GROUPS_PER_TASK = 1024


@dataclass(frozen=True)
class Splat2D:
    """Screen-space footprint of one Gaussian."""

    center: Array  # (2,) pixels
    covariance: Array  # (2, 2) pixels^2, low-pass included
    depth: float  # camera z of the center
    radius: int  # 3-sigma extent in pixels
    color: Array  # (3,) view-dependent color


@dataclass(frozen=True)
class GaussianRender:
    """Unnormalized accumulations plus per-Gaussian contributing-pair counts."""

    color: Array  # (H, W, 3) C_G
    weight: Array  # (H, W) W_G
    contributions: IntArray  # (N,)

    @classmethod
    def empty(cls, shape: tuple[int, int], count: int = 0) -> "GaussianRender":
        h, w = shape
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros(count, dtype=np.int64))


@dataclass(frozen=True)
class RenderProduct:
    """Both rendering passes and their composite for one view."""

    sdf: SdfRender
    gaussians: GaussianRender
    composite: Array  # (H, W, 3) C*

    @property
    def loss_mask(self) -> NDArray[np.bool_]:
        """Pixels the photometric loss sees: SDF hits only, the black background is excluded."""
        return self.sdf.hit


@dataclass
class _Projected:
    """Projection of the visible subset, with the intermediates backward needs."""

    index: IntArray  # into the Gaussian set
    cam: Array  # (M, 3)
    rotation: Array  # (M, 3, 3) from the unit quaternion
    unit_q: Array  # (M, 4)
    q_norm: Array  # (M,)
    scales: Array  # (M, 3)
    cov3d: Array  # (M, 3, 3)
    transform: Array  # (M, 2, 3) = J W
    conic: Array  # (M, 3) inverse 2D covariance (a, b, c)
    cov2d: Array  # (M, 2, 2)
    mean2d: Array  # (M, 2)
    radius: IntArray
    opacity: Array
    colors: Array
    basis: Array  # (M, K)
    color_mask: NDArray[np.bool_]  # (M, 3)
    view_dirs: Array  # (M, 3)
    view_dist: Array  # (M,)
    u0: IntArray
    v0: IntArray
    nu: IntArray
    nv: IntArray
    pair_start: IntArray  # (M + 1,)

    def __len__(self) -> int:
        return len(self.index)


def _project_all(
    gaussians: GaussianSet, pose: Pose, intr: Intrinsics, cfg: RenderConfig
) -> _Projected:
    world_to_cam = pose.rotation.T
    cam = (gaussians.positions - pose.translation) @ world_to_cam.T
    index = np.flatnonzero(cam[:, 2] > cfg.near_clip)

    cam = cam[index]
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    q = gaussians.rotations[index]
    q_norm = np.linalg.norm(q, axis=1)
    unit_q = q / q_norm[:, None]
    rotation = quaternion_matrices(unit_q)
    scales = np.exp(gaussians.log_scales[index])
    m = rotation * scales[:, None, :]
    cov3d = m @ m.transpose(0, 2, 1)

    jacobian = np.zeros((len(index), 2, 3))
    jacobian[:, 0, 0] = intr.fx / z
    jacobian[:, 0, 2] = -intr.fx * x / z**2
    jacobian[:, 1, 1] = intr.fy / z
    jacobian[:, 1, 2] = -intr.fy * y / z**2
    transform = jacobian @ world_to_cam
    cov2d = transform @ cov3d @ transform.transpose(0, 2, 1)
    cov2d[:, 0, 0] += cfg.lowpass
    cov2d[:, 1, 1] += cfg.lowpass

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    positive = det > 0
    safe_det = np.where(positive, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    mid = 0.5 * (a + c)
    lambda_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(np.maximum(lambda_max, 0.0)))

    mean2d = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)
    u_lo = np.maximum(np.ceil(mean2d[:, 0] - radius), 0.0)
    u_hi = np.minimum(np.floor(mean2d[:, 0] + radius), intr.width - 1.0)
    v_lo = np.maximum(np.ceil(mean2d[:, 1] - radius), 0.0)
    v_hi = np.minimum(np.floor(mean2d[:, 1] + radius), intr.height - 1.0)
    visible = positive & (radius > 0) & (u_hi >= u_lo) & (v_hi >= v_lo)

    keep = np.flatnonzero(visible)
    index = index[keep]
    positions = gaussians.positions[index]
    offsets = positions - pose.translation
    view_dist = np.linalg.norm(offsets, axis=1)
    view_dirs = offsets / view_dist[:, None]
    colors, basis, color_mask = sh_basis.evaluate(gaussians.sh[index], view_dirs)

    u0 = u_lo[keep].astype(np.int64)
    v0 = v_lo[keep].astype(np.int64)
    nu = u_hi[keep].astype(np.int64) - u0 + 1
    nv = v_hi[keep].astype(np.int64) - v0 + 1
    pair_start = np.concatenate([[0], np.cumsum(nu * nv)]).astype(np.int64)

    return _Projected(
        index=index,
        cam=cam[keep],
        rotation=rotation[keep],
        unit_q=unit_q[keep],
        q_norm=q_norm[keep],
        scales=scales[keep],
        cov3d=cov3d[keep],
        transform=transform[keep],
        conic=conic[keep],
        cov2d=cov2d[keep],
        mean2d=mean2d[keep],
        radius=radius[keep].astype(np.int64),
        opacity=gaussians.opacity[index],
        colors=colors,
        basis=basis,
        color_mask=color_mask,
        view_dirs=view_dirs,
        view_dist=view_dist,
        u0=u0,
        v0=v0,
        nu=nu,
        nv=nv,
        pair_start=pair_start,
    )


def project(
    gaussians: GaussianSet,
    pose: Pose,
    intr: Intrinsics,
    cfg: RenderConfig | None = None,
) -> list[Splat2D | None]:
    """Project every Gaussian; None marks culled ones (behind the near clip or off-image)."""
    cfg = cfg or RenderConfig()
    proj = _project_all(gaussians, pose, intr, cfg)
    splats: list[Splat2D | None] = [None] * len(gaussians)
    for row, i in enumerate(proj.index):
        splats[i] = Splat2D(
            center=proj.mean2d[row].copy(),
            covariance=proj.cov2d[row].copy(),
            depth=float(proj.cam[row, 2]),
            radius=int(proj.radius[row]),
            color=proj.colors[row].copy(),
        )
    return splats


def _pairs(proj: _Projected, span: tuple[int, int]) -> tuple[IntArray, IntArray, IntArray]:
    ids = np.arange(span[0], span[1], dtype=np.int64)
    g = np.searchsorted(proj.pair_start, ids, side="right") - 1
    local = ids - proj.pair_start[g]
    u = proj.u0[g] + local % proj.nu[g]
    v = proj.v0[g] + local // proj.nu[g]
    return g, u, v


def _pair_alpha(
    proj: _Projected,
    g: IntArray,
    u: IntArray,
    v: IntArray,
    surface: Array,
    width: int,
    cfg: RenderConfig,
) -> tuple[Array, Array, Array]:
    """Offsets (dx, dy) and effective alpha; alpha is 0 for culled or faint pairs."""
    dx = u - proj.mean2d[g, 0]
    dy = v - proj.mean2d[g, 1]
    qa, qb, qc = proj.conic[g, 0], proj.conic[g, 1], proj.conic[g, 2]
    power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy
    alpha = proj.opacity[g] * np.exp(power)
    depth = surface[v * width + u]
    # No depth test where the SDF missed
    visible = (depth <= 0) | (proj.cam[g, 2] < depth + cfg.epsilon)
    keep = visible & (alpha >= cfg.alpha_cutoff)
    return dx, dy, np.where(keep, alpha, 0.0)


def _tasks(proj: _Projected, cfg: RenderConfig) -> list[tuple[int, int]]:
    return chunk_ranges(int(proj.pair_start[-1]), cfg.group_size * GROUPS_PER_TASK)


def accumulate(
    gaussians: GaussianSet,
    pose: Pose,
    intr: Intrinsics,
    depth: Array,
    cfg: RenderConfig | None = None,
) -> GaussianRender:
    """Accumulate C_G and W_G with per-pixel depth culling against `depth` (D_t)."""
    cfg = cfg or RenderConfig()
    proj = _project_all(gaussians, pose, intr, cfg)
    if len(proj) == 0 or proj.pair_start[-1] == 0:
        return GaussianRender.empty(intr.shape, len(gaussians))
    surface = np.asarray(depth, dtype=np.float64).reshape(-1)

    def run(span: tuple[int, int]) -> tuple[IntArray, Array, int, IntArray]:
        g, u, v = _pairs(proj, span)
        _, _, alpha = _pair_alpha(proj, g, u, v, surface, intr.width, cfg)
        pixels, inverse = np.unique(v * intr.width + u, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.empty((len(pixels), 4))
        sums[:, 0] = np.bincount(inverse, alpha, minlength=len(pixels))
        for ch in range(3):
            sums[:, ch + 1] = np.bincount(
                inverse, alpha * proj.colors[g, ch], minlength=len(pixels)
            )
        first = int(g[0])
        counts = np.bincount(g - first, (alpha > 0).astype(np.float64))
        return pixels, sums, first, counts.astype(np.int64)

    flat = np.zeros((intr.height * intr.width, 4))
    visible_counts = np.zeros(len(proj), dtype=np.int64)
    for pixels, sums, first, counts in parallel_map(run, _tasks(proj, cfg)):
        flat[pixels] += sums
        visible_counts[first : first + len(counts)] += counts

    contributions = np.zeros(len(gaussians), dtype=np.int64)
    contributions[proj.index] = visible_counts
    h, w = intr.shape
    return GaussianRender(
        color=flat[:, 1:].reshape(h, w, 3),
        weight=flat[:, 0].reshape(h, w),
        contributions=contributions,
    )


def compose(sdf_color: Array, render: GaussianRender) -> Array:
    """C* = (C_t * 1 + C_G) / (1 + W_G)."""
    return (sdf_color + render.color) / (1.0 + render.weight)[..., None]


def loss_l1(
    composite: Array, target: Array, mask: NDArray[np.bool_]
) -> tuple[float, Array]:
    """Mean absolute error over masked pixels and channels, with its gradient.

    The pipeline passes `RenderProduct.loss_mask`, which holds SDF hits only:
    pixels where the raycast missed are left out even when Gaussians cover them.
    An empty mask gives zero loss and a zero gradient.
    """
    count = int(mask.sum()) * 3
    if count == 0:
        return 0.0, np.zeros_like(composite)
    diff = composite - target
    loss = float(np.abs(diff[mask]).sum() / count)
    grad = np.where(mask[..., None], np.sign(diff), 0.0) / count
    return loss, grad


def _orientation_gradient(q: Array, g_r: Array) -> Array:
    """dL/dq of a unit (w, x, y, z) quaternion given dL/dR."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g_r
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=1)


def backward(
    gaussians: GaussianSet,
    pose: Pose,
    intr: Intrinsics,
    sdf: SdfRender,
    grad_composite: Array,
    cfg: RenderConfig | None = None,
    forward: GaussianRender | None = None,
) -> GaussianGradients:
    """Exact gradients of a loss on C* with respect to every raw parameter.

    Args:
        gaussians: The rendered set.
        pose, intr: The view.
        sdf: SDF render of the view (supplies C_t and the culling depth D_t).
        grad_composite: dL/dC* of shape (H, W, 3).
        cfg: Render parameters used by the forward pass.
        forward: Cached `accumulate` output; recomputed when None.
    """
    cfg = cfg or RenderConfig()
    grads = GaussianGradients.zeros_like(gaussians)
    proj = _project_all(gaussians, pose, intr, cfg)
    if len(proj) == 0 or proj.pair_start[-1] == 0:
        return grads
    if forward is None:
        forward = accumulate(gaussians, pose, intr, sdf.depth, cfg)

    denom = 1.0 + forward.weight
    composite = (sdf.color + forward.color) / denom[..., None]
    g_color_px = (grad_composite / denom[..., None]).reshape(-1, 3)
    g_weight_px = (-(grad_composite * composite).sum(axis=-1) / denom).reshape(-1)
    surface = sdf.depth.reshape(-1)
    m = len(proj)

    def run(span: tuple[int, int]) -> tuple[int, Array]:
        g, u, v = _pairs(proj, span)
        dx, dy, alpha = _pair_alpha(proj, g, u, v, surface, intr.width, cfg)
        pix = v * intr.width + u
        g_color = g_color_px[pix]
        g_alpha = (g_color * proj.colors[g]).sum(axis=1) + g_weight_px[pix]
        g_power = g_alpha * alpha
        qa, qb, qc = proj.conic[g, 0], proj.conic[g, 1], proj.conic[g, 2]

        first = int(g[0])
        local = g - first
        count = int(local[-1]) + 1
        terms = (
            alpha[:, None] * g_color,  # colors (3)
            (g_power * (1.0 - proj.opacity[g]))[:, None],  # raw opacity
            (g_power * (qa * dx + qb * dy))[:, None],  # mean x
            (g_power * (qb * dx + qc * dy))[:, None],  # mean y
            (g_power * -0.5 * dx * dx)[:, None],  # conic a
            (g_power * -dx * dy)[:, None],  # conic b
            (g_power * -0.5 * dy * dy)[:, None],  # conic c
        )
        stacked = np.concatenate(terms, axis=1)
        out = np.empty((count, stacked.shape[1]))
        for col in range(stacked.shape[1]):
            out[:, col] = np.bincount(local, stacked[:, col], minlength=count)
        return first, out

    acc = np.zeros((m, 9))
    for first, part in parallel_map(run, _tasks(proj, cfg)):
        acc[first : first + len(part)] += part

    g_colors = acc[:, 0:3]
    g_raw_opacity = acc[:, 3]
    g_mean = acc[:, 4:6]
    g_qa, g_qb, g_qc = acc[:, 6], acc[:, 7], acc[:, 8]

    # Color -> SH coefficients and view direction
    g_raw_color = np.where(proj.color_mask, g_colors, 0.0)
    g_sh = proj.basis[:, :, None] * g_raw_color[:, None, :]
    sh = gaussians.sh[proj.index]
    d_basis = sh_basis.basis_gradient(gaussians.sh_degree, proj.view_dirs)
    g_dir = np.einsum("mkc,mc,mkj->mj", sh, g_raw_color, d_basis)
    dirs = proj.view_dirs
    g_pos_view = (g_dir - dirs * (dirs * g_dir).sum(axis=1, keepdims=True)) / proj.view_dist[:, None]

    # Conic -> 2D covariance
    q2 = np.empty((m, 2, 2))
    q2[:, 0, 0], q2[:, 0, 1], q2[:, 1, 0], q2[:, 1, 1] = (
        proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 1], proj.conic[:, 2]
    )
    g_q2 = np.empty((m, 2, 2))
    g_q2[:, 0, 0], g_q2[:, 0, 1], g_q2[:, 1, 0], g_q2[:, 1, 1] = g_qa, 0.5 * g_qb, 0.5 * g_qb, g_qc
    g_cov2d = -q2 @ g_q2 @ q2

    # 2D covariance -> 3D covariance and the projection transform T = J W
    t = proj.transform
    g_cov3d = t.transpose(0, 2, 1) @ g_cov2d @ t
    g_transform = 2.0 * g_cov2d @ t @ proj.cov3d
    g_jacobian = g_transform @ pose.rotation

    # Jacobian and screen mean -> camera-space position
    x, y, z = proj.cam[:, 0], proj.cam[:, 1], proj.cam[:, 2]
    fx, fy = intr.fx, intr.fy
    g_cam = np.empty((m, 3))
    g_cam[:, 0] = -g_jacobian[:, 0, 2] * fx / z**2 + g_mean[:, 0] * fx / z
    g_cam[:, 1] = -g_jacobian[:, 1, 2] * fy / z**2 + g_mean[:, 1] * fy / z
    g_cam[:, 2] = (
        -g_jacobian[:, 0, 0] * fx / z**2
        + g_jacobian[:, 0, 2] * 2.0 * fx * x / z**3
        - g_jacobian[:, 1, 1] * fy / z**2
        + g_jacobian[:, 1, 2] * 2.0 * fy * y / z**3
        - g_mean[:, 0] * fx * x / z**2
        - g_mean[:, 1] * fy * y / z**2
    )
    g_positions = g_cam @ pose.rotation.T + g_pos_view

    # 3D covariance -> scale and rotation (Sigma = M M^T, M = R S)
    m_mat = proj.rotation * proj.scales[:, None, :]
    g_m = 2.0 * g_cov3d @ m_mat
    g_scales = (g_m * proj.rotation).sum(axis=1)
    g_rot = g_m * proj.scales[:, None, :]
    g_unit_q = _orientation_gradient(proj.unit_q, g_rot)
    g_q = (
        g_unit_q - proj.unit_q * (proj.unit_q * g_unit_q).sum(axis=1, keepdims=True)
    ) / proj.q_norm[:, None]

    idx = proj.index
    grads.positions[idx] = g_positions
    grads.log_scales[idx] = g_scales * proj.scales
    grads.rotations[idx] = g_q
    grads.raw_opacity[idx] = g_raw_opacity
    grads.sh[idx] = g_sh
    return grads


def render_view(
    source: SdfRender | TsdfVolume,
    gaussians: GaussianSet,
    pose: Pose,
    intr: Intrinsics,
    cfg: RenderConfig | None = None,
    use_gaussians: bool = True,
) -> RenderProduct:
    """Two-pass render: SDF raycast (or a cached one), then splatting and compose.

    With `use_gaussians=False` the Gaussian pass is skipped and C* equals C_t.
    """
    cfg = cfg or RenderConfig()
    sdf = source.raycast(pose, intr) if isinstance(source, TsdfVolume) else source
    if use_gaussians and len(gaussians):
        splats = accumulate(gaussians, pose, intr, sdf.depth, cfg)
    else:
        splats = GaussianRender.empty(intr.shape, len(gaussians))
    return RenderProduct(sdf=sdf, gaussians=splats, composite=compose(sdf.color, splats))


def loss_and_gradients(
    sdf: SdfRender,
    target: Array,
    gaussians: GaussianSet,
    pose: Pose,
    intr: Intrinsics,
    cfg: RenderConfig | None = None,
) -> tuple[float, GaussianGradients]:
    """L1 photometric loss of one view and its Gaussian gradients."""
    cfg = cfg or RenderConfig()
    product = render_view(sdf, gaussians, pose, intr, cfg)
    loss, grad = loss_l1(product.composite, target, product.loss_mask)
    if not len(gaussians):
        return loss, GaussianGradients.zeros_like(gaussians)
    return loss, backward(gaussians, pose, intr, sdf, grad, cfg, forward=product.gaussians)
