"""Single-head attention arithmetic and its analytic derivatives.

Logits are ``A = Q K^T`` with no ``1/sqrt(D)`` factor unless ``scale=True``;
every derivative below is written for the unscaled form. Indices are 0-based.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttentionOutput:
    a: np.ndarray  # logits, length T
    s: np.ndarray  # softmax scores, length T
    x: np.ndarray  # output, length D


def as_vector(values, name="vector"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(values, name="matrix"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax(a):
    """Numerically stable softmax.

    The max is subtracted before exponentiation; this is exact up to rounding
    and keeps ``exp`` in range for any finite input.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty logits")
    arr = as_vector(arr, "logits")
    e = np.exp(arr - arr.max())
    return e / e.sum()


def attention_forward(q, k, v, scale=False):
    q = as_vector(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    if k.shape[1] != q.shape[0]:
        raise ValueError(f"head dim mismatch: q has D={q.shape[0]}, k has D={k.shape[1]}")
    if v.shape[1] != q.shape[0]:
        raise ValueError(f"head dim mismatch: q has D={q.shape[0]}, v has D={v.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"token count mismatch: k has T={k.shape[0]}, v has T={v.shape[0]}")
    a = k @ q
    if scale:
        a = a / np.sqrt(q.shape[0])
    s = softmax(a)
    return AttentionOutput(a=a, s=s, x=s @ v)


def _check_probability_vector(s):
    s = as_vector(s, "s")
    if np.any(s < -1e-12) or abs(s.sum() - 1.0) > 1e-9:
        raise ValueError("s is not a probability vector")
    return s


def softmax_jacobian(s):
    """Matrix ``J[j, t] = dS_j / dA_t = s_j (delta_jt - s_t)``."""
    s = _check_probability_vector(s)
    return np.diag(s) - np.outer(s, s)


def _check_index(idx, n, name):
    if not 0 <= idx < n:
        raise IndexError(f"{name}={idx} out of range [0, {n})")


def grad_x_wrt_v(s, t, i, j):
    """dX_j / dV_ti: the attention score of token t on the diagonal, else 0."""
    s = as_vector(s, "s")
    _check_index(t, s.shape[0], "t")
    if i < 0 or j < 0:
        raise IndexError("negative head-dim index")
    return float(s[t]) if i == j else 0.0


def grad_x_wrt_k(q, s, v, x, t, i, j):
    """dX_j / dK_ti = S_t * Q_i * (V_tj - X_j)."""
    q = as_vector(q, "q")
    s = as_vector(s, "s")
    v = as_matrix(v, "v")
    x = as_vector(x, "x")
    _check_index(t, s.shape[0], "t")
    _check_index(i, q.shape[0], "i")
    _check_index(j, x.shape[0], "j")
    return float(s[t] * q[i] * (v[t, j] - x[j]))


def grad_x_wrt_k_full(q, s, v, x):
    """All of ``dX_j / dK_ti`` at once, indexed ``[t, i, j]``."""
    q = as_vector(q, "q")
    s = as_vector(s, "s")
    v = as_matrix(v, "v")
    x = as_vector(x, "x")
    return s[:, None, None] * q[None, :, None] * (v - x[None, :])[:, None, :]
