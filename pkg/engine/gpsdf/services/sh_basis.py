"""Real spherical-harmonics basis up to degree 3 and its direction derivatives.

Coefficients follow the Gaussian-splatting convention: a color is
`sum_k sh[k] * Y_k(d) + 0.5`, clamped at zero.
"""

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

MAX_DEGREE = 3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
COLOR_OFFSET = 0.5


def coefficient_count(degree: int) -> int:
    return (degree + 1) ** 2


def degree_of(count: int) -> int:
    """Inverse of `coefficient_count`."""
    degree = int(round(np.sqrt(count))) - 1
    if not 0 <= degree <= MAX_DEGREE or coefficient_count(degree) != count:
        raise ValueError(f"{count} is not a supported SH coefficient count")
    return degree


def rgb_to_sh0(rgb: Array) -> Array:
    return (np.asarray(rgb, dtype=np.float64) - COLOR_OFFSET) / SH_C0


def sh0_to_rgb(sh0: Array) -> Array:
    return np.asarray(sh0, dtype=np.float64) * SH_C0 + COLOR_OFFSET


def eval_basis(degree: int, dirs: Array) -> Array:
    """Basis values Y_k at unit directions (N, 3); returns (N, (degree+1)^2)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((len(dirs), coefficient_count(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def basis_gradient(degree: int, dirs: Array) -> Array:
    """Partials dY_k/d(x, y, z) of the polynomial basis; returns (N, K, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    grad = np.zeros((len(dirs), coefficient_count(degree), 3))
    if degree >= 1:
        grad[:, 1, 1] = -SH_C1
        grad[:, 2, 2] = SH_C1
        grad[:, 3, 0] = -SH_C1
    if degree >= 2:
        grad[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
        grad[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
        grad[:, 6] = SH_C2[2] * np.stack([-2.0 * x, -2.0 * y, 4.0 * z], axis=1)
        grad[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
        grad[:, 8] = SH_C2[4] * np.stack([2.0 * x, -2.0 * y, zero], axis=1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        grad[:, 9] = SH_C3[0] * np.stack([6.0 * x * y, 3.0 * xx - 3.0 * yy, zero], axis=1)
        grad[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        grad[:, 11] = SH_C3[2] * np.stack(
            [-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z], axis=1
        )
        grad[:, 12] = SH_C3[3] * np.stack(
            [-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy], axis=1
        )
        grad[:, 13] = SH_C3[4] * np.stack(
            [4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z], axis=1
        )
        grad[:, 14] = SH_C3[5] * np.stack([2.0 * x * z, -2.0 * y * z, xx - yy], axis=1)
        grad[:, 15] = SH_C3[6] * np.stack([3.0 * xx - 3.0 * yy, -6.0 * x * y, zero], axis=1)
    return grad


def evaluate(sh: Array, dirs: Array) -> tuple[Array, Array, NDArray[np.bool_]]:
    """View-dependent colors of (N, K, 3) coefficients along unit directions.

    Returns:
        colors (N, 3), the basis values (N, K) and the mask of channels that were
        not clamped (N, 3); the latter two feed the backward pass.
    """
    degree = degree_of(sh.shape[1])
    basis = eval_basis(degree, dirs)
    raw = np.einsum("nk,nkc->nc", basis, sh) + COLOR_OFFSET
    positive = raw > 0
    return np.where(positive, raw, 0.0), basis, positive
