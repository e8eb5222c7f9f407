"""Inverse normal CDF and inverse complementary error function.

The initial guess is P. J. Acklam's rational approximation (relative error
about 1.15e-9), refined by one Newton step against ``scipy.special.erfc``.
The upper half is evaluated through the reflection ``ppf(p) = -ppf(1 - p)``;
``1 - p`` is exact in binary floating point for ``p >= 0.5``, so the Newton
residual never suffers cancellation near 1.
"""

import numpy as np
from scipy.special import erfc

_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = np.sqrt(2.0)
_SQRT2PI = np.sqrt(2.0 * np.pi)


def _acklam_lower(p):
    # p in (0, 0.5]
    x = np.empty_like(p)
    tail = p < _P_LOW
    q = np.sqrt(-2.0 * np.log(p[tail]))
    x[tail] = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
               / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p[~tail] - 0.5
    r = q * q
    x[~tail] = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
                / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    return x


def norm_ppf(p):
    """Quantile function of the standard normal distribution.

    Accepts scalars or arrays. ``p == 0`` and ``p == 1`` map to -inf and +inf;
    values outside [0, 1] raise ``ValueError``.
    """
    arr = np.asarray(p, dtype=np.float64)
    if np.any((arr < 0.0) | (arr > 1.0)) or np.any(np.isnan(arr)):
        raise ValueError("probability outside [0, 1]")
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    upper = flat > 0.5
    lower_p = np.where(upper, 1.0 - flat, flat)
    inner = (lower_p > 0.0)
    x = np.full_like(flat, -np.inf)
    if np.any(inner):
        lp = lower_p[inner]
        guess = _acklam_lower(lp)
        resid = 0.5 * erfc(-guess / _SQRT2) - lp
        guess = guess - resid * _SQRT2PI * np.exp(0.5 * guess * guess)
        x[inner] = guess
    out[:] = np.where(upper, -x, x)
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def erfcinv(y):
    """Inverse of ``erfc`` on [0, 2]."""
    arr = np.asarray(y, dtype=np.float64)
    if np.any((arr < 0.0) | (arr > 2.0)):
        raise ValueError("erfcinv argument outside [0, 2]")
    res = -np.asarray(norm_ppf(arr / 2.0)) / _SQRT2
    if arr.ndim == 0:
        return float(res)
    return res
