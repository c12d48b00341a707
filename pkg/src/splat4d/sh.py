"""Real spherical-harmonic color evaluation (degrees 0-2) and its adjoint."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
MAX_DEGREE = 2


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values ``(N, k)`` for unit directions ``(N, 3)``."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(cols, axis=1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Derivatives ``(N, k, 3)`` of each basis function w.r.t. ``(x, y, z)``."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((n, num_coeffs(degree), 3))
    if degree >= 1:
        out[:, 1, 1] = -SH_C1
        out[:, 2, 2] = SH_C1
        out[:, 3, 0] = -SH_C1
    if degree >= 2:
        out[:, 4, 0], out[:, 4, 1] = SH_C2[0] * y, SH_C2[0] * x
        out[:, 5, 1], out[:, 5, 2] = SH_C2[1] * z, SH_C2[1] * y
        out[:, 6, 0], out[:, 6, 1], out[:, 6, 2] = (
            -2 * SH_C2[2] * x,
            -2 * SH_C2[2] * y,
            4 * SH_C2[2] * z,
        )
        out[:, 7, 0], out[:, 7, 2] = SH_C2[3] * z, SH_C2[3] * x
        out[:, 8, 0], out[:, 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    return out


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient reproducing ``rgb`` (inverse of the +0.5 color offset)."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
