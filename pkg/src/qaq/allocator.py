"""Attention-aware error budgets and per-token bit allocation."""

import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from qaq.quantizer import CODECS, bits_for_mae_uniform, bits_for_std

KEY_MODES = ("main_variance", "appendix_mae")
REQUANTIZE_SOURCES = ("in_place", "backing_store")
CALIB_MODES = ("warmup", "streaming")
BIT_POLICIES = ("qaq", "uniform")


@dataclass(frozen=True)
class QuantConfig:
    """Hyperparameters of the quantized cache.

    ``sigma_s_max`` and ``sigma_x_max`` bound the standard deviation that
    quantization may add to each attention score and each output component.
    ``e_s_max`` is the mean-squared score error budget used by the
    ``appendix_mae`` key mode.
    """

    sigma_s_max: float = 0.002
    sigma_x_max: float = 0.02
    e_s_max: float = 1e-6
    alpha: float = 0.01
    outlier_budget: str = "per_end"
    window_n: int = 5
    query_quantile_p: float = 0.9
    bmin: int = 1
    bmax: int = 16
    baseline_bits: int = 16
    key_mode: str = "main_variance"
    requantize_source: str = "in_place"
    codec: str = "midpoint"
    calib_mode: str = "warmup"
    calib_steps: int = 32
    calib_reservoir: int = 256
    bit_policy: str = "qaq"
    uniform_bits_k: int = 4
    uniform_bits_v: int = 4

    def __post_init__(self):
        for name in ("sigma_s_max", "sigma_x_max", "e_s_max"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha < 0.5:
            raise ValueError("alpha must lie in [0, 0.5)")
        if self.window_n < 1:
            raise ValueError("window_n must be >= 1")
        if not 0.0 < self.query_quantile_p <= 1.0:
            raise ValueError("query_quantile_p must lie in (0, 1]")
        if not 0 <= self.bmin <= self.bmax <= self.baseline_bits:
            raise ValueError("need 0 <= bmin <= bmax <= baseline_bits")
        if self.baseline_bits not in (16, 32, 64):
            raise ValueError("baseline_bits must be 16, 32 or 64")
        for name, allowed in (("key_mode", KEY_MODES), ("requantize_source", REQUANTIZE_SOURCES),
                              ("codec", CODECS), ("calib_mode", CALIB_MODES),
                              ("bit_policy", BIT_POLICIES),
                              ("outlier_budget", ("per_end", "total"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")
        if self.calib_steps < 0 or self.calib_reservoir < 1:
            raise ValueError("calib_steps must be >= 0 and calib_reservoir >= 1")
        for name in ("uniform_bits_k", "uniform_bits_v"):
            if not 0 <= getattr(self, name) <= self.baseline_bits:
                raise ValueError(f"{name} must lie in [0, baseline_bits]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown quant config keys: {sorted(unknown)}")
        return cls(**data)


def nearest_rank(samples, p):
    """Order statistic at 1-based sorted rank ``ceil(p * N)``."""
    ordered = sorted(samples)
    rank = max(1, math.ceil(p * len(ordered) - 1e-12))
    return ordered[rank - 1]


@dataclass
class QueryCalibration:
    """Distribution of query statistics feeding the key budget.

    Tracks the squared norm of each query (main key mode) and its largest
    absolute component (appendix key mode). With ``reservoir`` set, only the
    most recent ``reservoir`` samples are kept.
    """

    p: float = 0.9
    reservoir: int | None = None
    samples: deque = field(default_factory=deque)
    max_abs_samples: deque = field(default_factory=deque)
    frozen: bool = False

    def __post_init__(self):
        self.samples = deque(self.samples, maxlen=self.reservoir)
        self.max_abs_samples = deque(self.max_abs_samples, maxlen=self.reservoir)

    def add(self, q):
        if self.frozen:
            raise RuntimeError("calibration is frozen")
        q = np.asarray(q, dtype=np.float64)
        self.samples.append(float(q @ q))
        self.max_abs_samples.append(float(np.abs(q).max()))

    def freeze(self):
        self.frozen = True
        return self

    @property
    def sample_count(self):
        return len(self.samples)

    @property
    def quantile_value(self):
        if not self.samples:
            raise ValueError("no calibration data")
        return nearest_rank(self.samples, self.p)

    @property
    def max_abs_quantile(self):
        if not self.max_abs_samples:
            raise ValueError("no calibration data")
        return nearest_rank(self.max_abs_samples, self.p)

    def to_dict(self):
        return {
            "p": self.p,
            "sample_count": self.sample_count,
            "quantile_value": self.quantile_value,
            "max_abs_quantile": self.max_abs_quantile,
            "samples": list(self.samples),
            "max_abs_samples": list(self.max_abs_samples),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(p=data["p"], samples=deque(data["samples"]),
                   max_abs_samples=deque(data["max_abs_samples"]), frozen=True)


def calibrate_query_norm(queries, p=0.9):
    calib = QueryCalibration(p=p)
    for q in queries:
        calib.add(q)
    if calib.sample_count == 0:
        raise ValueError("no calibration data")
    return calib.freeze()


def value_std_bound(s_t, T, sigma_x_max):
    """Largest per-entry value-cache std that keeps the output std within budget.

    Equal to ``sigma_x_max / (sqrt(T) * |s_t|)``; a zero score gives ``inf``.
    """
    s = np.abs(np.asarray(s_t, dtype=np.float64))
    with np.errstate(divide="ignore"):
        out = np.where(s == 0, np.inf, sigma_x_max / (math.sqrt(T) * s))
    return float(out) if out.ndim == 0 else out


def key_var_bound_main(q_sq_norm, T, sigma_s_max):
    """Variance bound for every key entry, ``ln(T^3/(T-1) * sigma_s^2 + 1) / |q|^2``."""
    if sigma_s_max == 0:
        return 0.0
    if T == 1:
        return math.inf
    if T < 1 or q_sq_norm <= 0:
        raise ValueError("need T >= 1 and q_sq_norm > 0")
    return math.log(T ** 3 / (T - 1) * sigma_s_max ** 2 + 1.0) / q_sq_norm


def _jacobian_column_max(s, t):
    # max_j |s_j (delta_jt - s_t)| without forming the full matrix
    s = np.asarray(s, dtype=np.float64)
    st = s[t]
    others = np.delete(s, t)
    off = others.max() * st if others.size else 0.0
    return max(abs(st - st * st), abs(off))


def _jacobian_column_max_all(s):
    s = np.asarray(s, dtype=np.float64)
    diag = np.abs(s - s * s)
    if s.size == 1:
        return diag
    order = np.argsort(s)
    top, second = s[order[-1]], s[order[-2]]
    other_max = np.where(np.arange(s.size) == order[-1], second, top)
    return np.maximum(diag, other_max * s)


def key_mae_bound_appendix(e_s_max, D, T, q_max_abs, s, t):
    """Per-token key MAE bound ``sqrt(E) / (sqrt(D) T q_max J_t)``.

    ``J_t`` is the largest magnitude in column ``t`` of the softmax Jacobian.
    """
    s = np.asarray(s, dtype=np.float64)
    if abs(s.sum() - 1.0) > 1e-9 or np.any(s < 0):
        raise ValueError("s is not a probability vector")
    if not 0 <= t < s.size:
        raise IndexError(f"t={t} out of range")
    j = _jacobian_column_max(s, t)
    if j == 0 or q_max_abs == 0:
        return math.inf
    return math.sqrt(e_s_max) / (math.sqrt(D) * T * q_max_abs * j)


def key_mae_bounds(e_s_max, D, T, q_max_abs, s):
    """Vector form of :func:`key_mae_bound_appendix` over all tokens.

    ``s`` may be a vector of window-maximum predictions, which need not sum
    to one.
    """
    j = _jacobian_column_max_all(s)
    with np.errstate(divide="ignore"):
        denom = math.sqrt(D) * T * q_max_abs * j
        return np.where(denom == 0, np.inf, math.sqrt(e_s_max) / denom)


def allocate_bits(k_ranges, v_ranges, predicted_s, calib, cfg, T, dim=None, horizon=None):
    """Per-token ``(bits_k, bits_v)`` arrays.

    ``k_ranges`` and ``v_ranges`` are ``(T, 2)`` arrays of ``(vmin, vmax)``
    measured after outlier removal. The bounds are evaluated for a cache of
    ``horizon`` tokens (default ``T``).
    """
    k_ranges = np.asarray(k_ranges, dtype=np.float64).reshape(-1, 2)
    v_ranges = np.asarray(v_ranges, dtype=np.float64).reshape(-1, 2)
    predicted_s = np.asarray(predicted_s, dtype=np.float64)
    if not (k_ranges.shape[0] == v_ranges.shape[0] == predicted_s.shape[0] == T):
        raise ValueError("ranges and predicted scores must all have length T")
    n = T if horizon is None else horizon
    if n < T:
        raise ValueError("horizon must be >= T")
    k_width = k_ranges[:, 1] - k_ranges[:, 0]
    v_width = v_ranges[:, 1] - v_ranges[:, 0]
    clamp = dict(bmin=cfg.bmin, bmax=cfg.bmax, full_bits=cfg.baseline_bits)

    if cfg.bit_policy == "uniform":
        bits_k = np.where(k_width == 0, 0, cfg.uniform_bits_k)
        bits_v = np.where(v_width == 0, 0, cfg.uniform_bits_v)
        return bits_k.astype(np.int64), bits_v.astype(np.int64)

    sigma_v = value_std_bound(predicted_s, n, cfg.sigma_x_max) if cfg.sigma_x_max > 0 \
        else np.zeros(T)
    bits_v = np.atleast_1d(bits_for_std(v_width, sigma_v, **clamp))

    if cfg.key_mode == "main_variance":
        var_k = key_var_bound_main(calib.quantile_value, n, cfg.sigma_s_max)
        bits_k = np.atleast_1d(bits_for_std(k_width, np.full(T, math.sqrt(var_k)), **clamp))
    else:
        if dim is None:
            raise ValueError("appendix key mode needs the head dimension")
        if cfg.e_s_max == 0:
            mae = np.zeros(T)
        elif n == 1:
            mae = np.full(T, np.inf)
        else:
            mae = key_mae_bounds(cfg.e_s_max, dim, n, calib.max_abs_quantile, predicted_s)
        bits_k = np.atleast_1d(bits_for_mae_uniform(k_width, mae, **clamp))
    return bits_k.astype(np.int64), bits_v.astype(np.int64)
