"""Real spherical harmonics up to degree 3.

Coefficient blocks have shape ``(..., K, C)`` with ``K = (degree + 1) ** 2``
in the usual ordering (l ascending, m = -l..l). The basis functions are
plain polynomials of the direction components, so evaluation also works on
``autodiff.Var`` directions and coefficients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
      1.0925484305920792, 0.5462742152960396)
C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
      0.3731763325901154, 0.4570457994644658, 1.445305721320277,
      0.5900435899266435)


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def degree_of(k: int) -> int:
    deg = int(round(np.sqrt(k))) - 1
    if num_coeffs(deg) != k or not 0 <= deg <= 3:
        raise ValueError(f"{k} is not a supported SH coefficient count")
    return deg


def basis(dirs, degree: int):
    """SH basis values, shape ``dirs.shape[:-1] + (K,)``."""
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [x * 0.0 + C0]
    if degree >= 1:
        out += [C1 * y, C1 * z, C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [C2[0] * x * y, C2[1] * y * z, C2[2] * (3.0 * zz - 1.0),
                C2[3] * x * z, C2[4] * (xx - yy)]
    if degree >= 3:
        out += [C3[0] * y * (3.0 * xx - yy),
                C3[1] * x * y * z,
                C3[2] * y * (5.0 * zz - 1.0),
                C3[3] * z * (5.0 * zz - 3.0),
                C3[4] * x * (5.0 * zz - 1.0),
                C3[5] * z * (xx - yy),
                C3[6] * x * (xx - 3.0 * yy)]
    return np.stack(out, axis=-1)


def sh_eval(coeffs, dirs):
    """Evaluate ``sum_lm c_lm Y_lm(dir)`` per channel.

    ``coeffs`` is ``(..., K, C)`` (or ``(K,)`` for a single channel) and must
    broadcast against ``dirs`` of shape ``(..., 3)``. Returns ``(..., C)``.
    """
    k = ad.value(coeffs).shape[-2] if ad.value(coeffs).ndim >= 2 else ad.value(coeffs).shape[-1]
    deg = degree_of(k)
    Y = basis(dirs, deg)
    if ad.value(coeffs).ndim == 1:
        return (Y * coeffs).sum(axis=-1)
    if ad.value(coeffs).ndim == 2:
        return Y @ coeffs
    return (Y[..., :, None] * coeffs).sum(axis=-2)


def sh_project(dirs, values, degree: int):
    """Least-squares SH fit of sampled values.

    Returns ``(coeffs, residual_rms)``; ``coeffs`` is ``(K,)`` for 1-D values
    and ``(K, C)`` otherwise. Raises ``ValueError`` if the sample set cannot
    determine all coefficients.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    K = num_coeffs(degree)
    if len(dirs) < K:
        raise ValueError(f"need at least {K} samples for degree {degree}, got {len(dirs)}")
    B = basis(dirs, degree)
    if np.linalg.matrix_rank(B) < K:
        raise ValueError("rank-deficient sample set for SH projection")
    coeffs, *_ = np.linalg.lstsq(B, values, rcond=None)
    resid = B @ coeffs - values
    return coeffs, float(np.sqrt(np.mean(resid ** 2)))
