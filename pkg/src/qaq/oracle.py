"""Independent checks of the statistical and analytic claims behind the codec.

Every check returns an :class:`McReport`. Monte-Carlo checks draw from
``numpy.random.PCG64`` seeded with ``SeedSequence([seed, crc32(claim)])``;
Gaussian variates come from numpy's ziggurat ``standard_normal``. The same
seed therefore reproduces every report exactly.

Tolerances are stated per claim: 3% for exact variance identities, 1% or 2%
for log-normal moments, 20% for the second-order ratio approximation.
"""

import fnmatch
import math
import warnings
import zlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate
from scipy.special import ndtri

from qaq.attention import attention_forward, grad_x_wrt_k_full, softmax, softmax_jacobian
from qaq.quantizer import (NORMAL_COEFFS, normal_dequantize, normal_quantize,
                           uniform_dequantize, uniform_quantize)

_CHUNK = 100_000
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class McReport:
    claim: str
    analytic: float
    empirical: float
    samples: int
    rel_error: float
    tolerance: float
    passed: bool
    metric: str = "relative"  # which error the tolerance applies to
    abs_error: float = 0.0

    def to_dict(self):
        return asdict(self)


def make_report(claim, analytic, empirical, samples, tolerance, metric="relative", extra_ok=True):
    analytic = float(analytic)
    empirical = float(empirical)
    abs_err = abs(empirical - analytic)
    rel = abs_err / max(abs(analytic), 1e-12)
    err = rel if metric == "relative" else abs_err
    return McReport(claim=claim, analytic=analytic, empirical=empirical, samples=int(samples),
                    rel_error=rel, tolerance=float(tolerance),
                    passed=bool(extra_ok and err <= tolerance), metric=metric, abs_error=abs_err)


def claim_rng(seed, claim):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(claim.encode())])))


class _Moments:
    """Streaming mean and variance (chunk-merged, numerically stable)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x):
        x = np.asarray(x, dtype=np.float64)
        nb = x.size
        if nb == 0:
            return
        mb = float(x.mean())
        m2b = float(((x - mb) ** 2).sum())
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n

    @property
    def var(self):
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0


def _chunks(n):
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        yield m
        done += m


# ------------------------------------------------------------ moment checks

def mc_variance_x(s, sigma_v, samples=100_000, seed=0, claim="variance_x", tolerance=0.03):
    """Variance of one output coordinate when each value gets independent noise."""
    s = np.asarray(s, dtype=np.float64)
    sigma_v = np.asarray(sigma_v, dtype=np.float64)
    if s.shape != sigma_v.shape:
        raise ValueError("s and sigma_v must have the same length")
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples")
    analytic = float(np.sum(s ** 2 * sigma_v ** 2))
    rng = claim_rng(seed, claim)
    base = rng.standard_normal(s.size)
    x0 = float(base @ s)
    mom = _Moments()
    for m in _chunks(samples):
        v_hat = base + sigma_v * rng.standard_normal((m, s.size))
        mom.add(v_hat @ s - x0)
    return make_report(claim, analytic, mom.var, samples, tolerance)


def mc_lognormal_moments(mu, sigma, samples=1_000_000, seed=0, claim="lognormal", tolerance=None):
    """Mean and variance of ``exp(Z)``, ``Z ~ N(mu, sigma)``; returns two reports."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if samples < 100_000:
        raise ValueError("need at least 1e5 samples")
    if sigma > 2:
        warnings.warn("heavy tail; MC variance unreliable", RuntimeWarning, stacklevel=2)
    if tolerance is None:
        tolerance = 0.01 if sigma <= 0.5 else 0.02
    mean = math.exp(mu + sigma ** 2 / 2)
    var = math.exp(2 * mu + sigma ** 2) * math.expm1(sigma ** 2)
    rng = claim_rng(seed, claim)
    mom = _Moments()
    for m in _chunks(samples):
        mom.add(np.exp(mu + sigma * rng.standard_normal(m)))
    emp_var = 0.0 if sigma == 0 else mom.var
    return (make_report(f"{claim}.mean", mean, mom.mean, samples, tolerance),
            make_report(f"{claim}.var", var, emp_var, samples, tolerance))


def ratio_variance_approx(T, q_sq_sigma_k):
    return (1.0 / T ** 2) * (1.0 - 1.0 / T) * math.expm1(q_sq_sigma_k)


def mc_ratio_variance(T, q_sq_sigma_k, samples=1_000_000, seed=0, claim="ratio_variance",
                      tolerance=0.2):
    """Variance of one softmax score when all logits are i.i.d. normal."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if q_sq_sigma_k < 0:
        raise ValueError("q_sq_sigma_k must be >= 0")
    analytic = ratio_variance_approx(T, q_sq_sigma_k)
    sd = math.sqrt(q_sq_sigma_k)
    rng = claim_rng(seed, claim)
    mom = _Moments()
    for m in _chunks(samples):
        a = sd * rng.standard_normal((m, T))
        a -= a.max(axis=1, keepdims=True)
        e = np.exp(a)
        mom.add(e[:, 0] / e.sum(axis=1))
    emp = 0.0 if q_sq_sigma_k == 0 else mom.var
    return make_report(claim, analytic, emp, samples, tolerance)


# ---------------------------------------------------------- normal codec

def _abs_moment(lo, hi, c):
    """Integral of |z - c| * phi(z) over [lo, hi], split at c."""
    total = 0.0
    for a, b in ((lo, min(c, hi)), (max(c, lo), hi)):
        if not a < b:
            continue
        val, err, info = integrate.quad(lambda z: abs(z - c) * math.exp(-z * z / 2.0) * _INV_SQRT2PI,
                                        a, b, epsabs=1e-8, epsrel=0.0, limit=200, full_output=1)[:3]
        if not err <= 1e-8 * 10:
            raise RuntimeError(f"quadrature did not converge on [{a}, {b}] (err {err:g})")
        total += val
    return total


def integrate_normal_coeff(b):
    """MAE of the equal-probability normal quantizer at unit sigma, by quadrature."""
    if not 1 <= b <= 8:
        raise ValueError("b must lie in [1, 8]")
    levels = 2 ** b
    edges = ndtri(np.arange(levels + 1) / levels)  # -inf ... inf
    centres = ndtri((np.arange(levels) + 0.5) / levels)
    return float(sum(_abs_moment(edges[i], edges[i + 1], centres[i]) for i in range(levels)))


def closed_form_normal_coeff(b):
    """The same coefficient from the Gaussian antiderivative, as a cross-check."""
    levels = 2 ** b
    z = ndtri(np.arange(2 * levels + 1) / (2 * levels))
    e = np.exp(-z ** 2 / 2.0)  # exp(-inf) = 0 at both ends
    return float(_INV_SQRT2PI * np.sum(2 * e[1::2] - e[0:-1:2] - e[2::2]))


# ----------------------------------------------------------- derivatives

def finite_diff_jacobian(f, x, h=1e-5):
    """Central differences; row ``i`` of the result is ``d f_i``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.asarray(f(xp.reshape(x.shape)), dtype=np.float64).reshape(-1)
        fm = np.asarray(f(xm.reshape(x.shape)), dtype=np.float64).reshape(-1)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)


def _derivative_instances(seed, claim, n=100, max_dim=16):
    rng = claim_rng(seed, claim)
    for _ in range(n):
        T = int(rng.integers(1, max_dim + 1))
        D = int(rng.integers(1, max_dim + 1))
        yield rng.standard_normal(D), rng.standard_normal((T, D)), rng.standard_normal((T, D))


def check_softmax_jacobian(seed=0, claim="derivatives.softmax_jacobian", n=100, h=1e-5, tol=1e-6):
    worst = 0.0
    for q, k, _ in _derivative_instances(seed, claim, n):
        a = k @ q
        fd = finite_diff_jacobian(softmax, a, h)
        worst = max(worst, float(np.abs(fd - softmax_jacobian(softmax(a))).max()))
    return make_report(claim, 0.0, worst, n, tol, metric="absolute")


def check_grad_v(seed=0, claim="derivatives.grad_x_wrt_v", n=100, h=1e-5, tol=1e-6):
    worst = 0.0
    for q, k, v in _derivative_instances(seed, claim, n):
        T, D = v.shape
        s = softmax(k @ q)
        fd = finite_diff_jacobian(lambda vv: attention_forward(q, k, vv).x, v, h)  # (D, T*D)
        analytic = np.zeros((D, T, D))
        for j in range(D):
            analytic[j, :, j] = s
        worst = max(worst, float(np.abs(fd - analytic.reshape(D, T * D)).max()))
    return make_report(claim, 0.0, worst, n, tol, metric="absolute")


def check_grad_k(seed=0, claim="derivatives.grad_x_wrt_k", n=100, h=1e-5, tol=1e-6):
    worst = 0.0
    for q, k, v in _derivative_instances(seed, claim, n):
        T, D = k.shape
        out = attention_forward(q, k, v)
        fd = finite_diff_jacobian(lambda kk: attention_forward(q, kk, v).x, k, h)  # (D, T*D)
        analytic = grad_x_wrt_k_full(q, out.s, v, out.x)  # [t, i, j]
        worst = max(worst, float(np.abs(fd - analytic.reshape(T * D, D).T).max()))
    return make_report(claim, 0.0, worst, n, tol, metric="absolute")


# --------------------------------------------------------- uniform codec

def check_uniform_codec(bits, seed=0, samples=100_000, tolerance=0.05):
    """Midpoint codec error: bounded by delta with std delta / sqrt(3)."""
    claim = f"uniform.b{bits}"
    rng = claim_rng(seed, claim)
    vmin, vmax = -1.5, 2.5
    x = rng.uniform(vmin, vmax, samples)
    err = uniform_dequantize(uniform_quantize(x, bits, vmin, vmax), bits, vmin, vmax) - x
    delta = (vmax - vmin) / 2 ** (bits + 1)
    bounded = bool(np.abs(err).max() <= delta * (1 + 1e-12))
    return make_report(claim, delta / math.sqrt(3.0), err.std(), samples, tolerance, extra_ok=bounded)


def check_normal_coeff(bits, table=None):
    table = NORMAL_COEFFS if table is None else table
    return make_report(f"normal_coeff.b{bits}", table[bits], integrate_normal_coeff(bits), 0, 1e-4,
                       metric="absolute")


def check_normal_quantize_mae(bits, seed=0, samples=1_000_000, table=None, tolerance=0.01):
    table = NORMAL_COEFFS if table is None else table
    claim = f"normal_quantize.mae_b{bits}"
    rng = claim_rng(seed, claim)
    total = 0.0
    for m in _chunks(samples):
        z = rng.standard_normal(m)
        total += float(np.abs(normal_dequantize(normal_quantize(z, bits, 1.0), bits, 1.0) - z).sum())
    return make_report(claim, table[bits], total / samples, samples, tolerance)


# ----------------------------------------------------------------- suite

def _random_softmax(rng):
    while True:
        T = int(rng.integers(2, 17))
        s = softmax(rng.normal(0.0, 1.5, T))
        if s.max() <= 0.99:
            return s, rng.uniform(0.05, 1.0, T)


def _claims(seed, coeff_table):
    out = [
        ("derivatives.softmax_jacobian", lambda: [check_softmax_jacobian(seed)]),
        ("derivatives.grad_x_wrt_v", lambda: [check_grad_v(seed)]),
        ("derivatives.grad_x_wrt_k", lambda: [check_grad_k(seed)]),
    ]
    for b in range(1, 9):
        out.append((f"uniform.b{b}", lambda b=b: [check_uniform_codec(b, seed)]))
    for b in range(1, 9):
        out.append((f"normal_coeff.b{b}", lambda b=b: [check_normal_coeff(b, coeff_table)]))
    for b in range(1, 9):
        out.append((f"normal_quantize.mae_b{b}",
                    lambda b=b: [check_normal_quantize_mae(b, seed, table=coeff_table)]))
    setup = claim_rng(seed, "variance_x.setup")
    cases = [_random_softmax(setup) for _ in range(20)]
    for i, (s, sv) in enumerate(cases):
        cid = f"variance_x.r{i:02d}"
        out.append((cid, lambda s=s, sv=sv, cid=cid: [mc_variance_x(s, sv, 100_000, seed, cid)]))
    for mu, sigma in ((0.0, 0.25), (0.3, 0.5), (0.0, 1.0), (-0.5, 1.0)):
        cid = f"lognormal.mu{mu:+.2f}_sigma{sigma:.2f}"
        out.append((cid, lambda mu=mu, sigma=sigma, cid=cid:
                    list(mc_lognormal_moments(mu, sigma, 1_000_000, seed, cid))))
    for T in (2, 4, 8, 16):
        for v in (0.01, 0.05, 0.1):
            cid = f"ratio_variance.T{T}_v{v:g}"
            out.append((cid, lambda T=T, v=v, cid=cid: [mc_ratio_variance(T, v, 1_000_000, seed, cid)]))
    return out


def claim_ids(seed=0):
    return [cid for cid, _ in _claims(seed, None)]


def _pattern(filter_glob):
    if filter_glob is None:
        return "*"
    if not any(ch in filter_glob for ch in "*?["):
        return f"*{filter_glob}*"
    return filter_glob


def run_suite(filter_glob=None, seed=0, coeff_table=None):
    """Run every claim whose id matches ``filter_glob``.

    A filter without wildcards matches as a substring, so ``lognormal``
    selects all log-normal claims.
    """
    pat = _pattern(filter_glob)
    reports = []
    for cid, fn in _claims(seed, coeff_table):
        if fnmatch.fnmatchcase(cid, pat):
            reports.extend(fn())
    return reports


def format_table(reports):
    head = f"{'claim':<40} {'analytic':>14} {'empirical':>14} {'error':>10} {'tol':>8}  result"
    lines = [head, "-" * len(head)]
    for r in reports:
        err = r.rel_error if r.metric == "relative" else r.abs_error
        lines.append(f"{r.claim:<40} {r.analytic:>14.6g} {r.empirical:>14.6g} {err:>10.3g} "
                     f"{r.tolerance:>8.3g}  {'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - failed}/{len(reports)} claims passed")
    return "\n".join(lines) + "\n"
