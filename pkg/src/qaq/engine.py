"""Quantized KV cache driven one decoding step at a time.

Each step appends the new token's key and value to a full-precision backing
store (the stand-in for host memory), attends over the reconstructed cache
with the new token still at full precision, records the scores in every
token's attention window, then re-allocates bits for all tokens. Lowering a
token's bits works from the current reconstruction (``in_place``) or the
backing store; raising them always re-reads the backing store and counts as a
backing fetch.

Memory accounting per token and cache: ``bits * (D - outliers)`` for the
codes, two baseline-precision range endpoints, an 8-bit bit-width tag, and
``ceil(log2 D) + baseline_bits`` per outlier. Full-precision tokens store
``baseline_bits * D`` plus the same metadata.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from qaq.allocator import QuantConfig, QueryCalibration, allocate_bits
from qaq.attention import as_vector, softmax
from qaq.outliers import OutlierSet, inlier_range, outlier_mask, sidecar_bits
from qaq.quantizer import QuantizedToken, dequantize, pack_codes, quantize_rows, unpack_codes
from qaq.window import ScoreWindow

TAG_BITS = 8
DUMP_FORMAT = "qaq-engine-dump/1"


@dataclass
class CacheStats:
    tokens: int = 0
    dim: int = 0
    total_quantized_bits: int = 0
    baseline_bits_total: int = 0
    compression_ratio: float = 0.0
    backing_fetches: int = 0
    s_error_l2: float = 0.0
    x_error_l2: float = 0.0
    s_error_std: float = 0.0
    x_error_std: float = 0.0
    mean_bits_k: float = 0.0
    mean_bits_v: float = 0.0
    bit_histogram_k: dict = field(default_factory=dict)
    bit_histogram_v: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


@dataclass
class StepResult:
    x_hat: np.ndarray
    s_hat: np.ndarray
    x: np.ndarray
    s: np.ndarray
    stats: CacheStats


class _Cache:
    """Column store for one of the two caches."""

    def __init__(self, dim, capacity=64):
        self.dim = dim
        self.backing = np.zeros((capacity, dim))
        self.recon = np.zeros((capacity, dim))
        self.codes = np.zeros((capacity, dim), dtype=np.int64)
        self.mask = np.zeros((capacity, dim), dtype=bool)
        self.vmin = np.zeros(capacity)
        self.vmax = np.zeros(capacity)
        self.bits = np.zeros(capacity, dtype=np.int64)
        # inlier range of the full-precision token, used for allocation
        self.range_lo = np.zeros(capacity)
        self.range_hi = np.zeros(capacity)

    def grow(self, capacity):
        for name in ("backing", "recon", "codes", "mask", "vmin", "vmax", "bits",
                     "range_lo", "range_hi"):
            old = getattr(self, name)
            new = np.zeros((capacity,) + old.shape[1:], dtype=old.dtype)
            new[: old.shape[0]] = old
            setattr(self, name, new)


def _memory_bits(bits, outlier_counts, dim, baseline_bits):
    bits = np.asarray(bits, dtype=np.int64)
    counts = np.asarray(outlier_counts, dtype=np.int64)
    full = bits >= baseline_bits
    code_bits = np.where(full, baseline_bits * dim, bits * (dim - counts))
    side = np.where(full, 0, sidecar_bits(counts, dim, baseline_bits))
    return int(np.sum(code_bits + side + 2 * baseline_bits + TAG_BITS))


def _histogram(bits):
    values, counts = np.unique(bits, return_counts=True)
    return {int(b): int(c) for b, c in zip(values, counts)}


class KVCacheEngine:
    """Single-head quantized KV cache.

    If ``calibration`` is omitted, query statistics are collected online:
    over the first ``cfg.calib_steps`` steps in ``warmup`` mode (then frozen),
    or continuously over the last ``cfg.calib_reservoir`` queries in
    ``streaming`` mode.
    """

    def __init__(self, dim, config=None, calibration=None):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.cfg = config if config is not None else QuantConfig()
        if calibration is not None:
            self.calib = calibration
            self._online_calib = False
        else:
            reservoir = self.cfg.calib_reservoir if self.cfg.calib_mode == "streaming" else None
            self.calib = QueryCalibration(p=self.cfg.query_quantile_p, reservoir=reservoir)
            self._online_calib = True
        self.T = 0
        self.step_count = 0
        self.backing_fetches = 0
        self._k = _Cache(dim)
        self._v = _Cache(dim)
        self._win = np.full((64, self.cfg.window_n), -np.inf)
        self._last_errors = {}

    # ------------------------------------------------------------------ state

    def _cache(self, which):
        if which == "k":
            return self._k
        if which == "v":
            return self._v
        raise ValueError("which must be 'k' or 'v'")

    def _ensure_capacity(self, n):
        cap = self._win.shape[0]
        if n <= cap:
            return
        while cap < n:
            cap *= 2
        self._k.grow(cap)
        self._v.grow(cap)
        win = np.full((cap, self.cfg.window_n), -np.inf)
        win[: self._win.shape[0]] = self._win
        self._win = win

    def reconstruct(self, which):
        return self._cache(which).recon[: self.T].copy()

    def backing(self, which):
        return self._cache(which).backing[: self.T].copy()

    def bits(self, which):
        return self._cache(which).bits[: self.T].copy()

    def entry(self, t, which):
        """The stored representation of token ``t`` as a :class:`QuantizedToken`."""
        self._check_token(t)
        c = self._cache(which)
        mask = c.mask[t]
        idx = np.flatnonzero(mask)
        bits = int(c.bits[t])
        full = bits >= self.cfg.baseline_bits
        return QuantizedToken(
            bits=bits,
            vmin=float(c.vmin[t]),
            vmax=float(c.vmax[t]),
            codes=c.codes[t][~mask],
            outliers=OutlierSet(idx, c.recon[t][idx]),
            dim=self.dim,
            codec=self.cfg.codec,
            raw=c.recon[t][~mask].copy() if full else None,
        )

    def window(self, t):
        self._check_token(t)
        row = self._win[t]
        return ScoreWindow(self.cfg.window_n, row[np.isfinite(row)].tolist())

    def predicted_scores(self):
        return self._win[: self.T].max(axis=1)

    def _check_token(self, t):
        if not 0 <= t < self.T:
            raise IndexError(f"token {t} out of range [0, {self.T})")

    # ------------------------------------------------------------- accounting

    def _outlier_counts(self, c):
        return c.mask[: self.T].sum(axis=1)

    def memory_bits(self):
        total = 0
        for c in (self._k, self._v):
            total += _memory_bits(c.bits[: self.T], self._outlier_counts(c), self.dim,
                                  self.cfg.baseline_bits)
        return total

    def snapshot_stats(self):
        if self.T < 1:
            raise ValueError("snapshot needs at least one token")
        return self._stats(self.memory_bits())

    def _stats(self, total_bits):
        baseline_total = self.T * 2 * self.dim * self.cfg.baseline_bits
        err = self._last_errors
        return CacheStats(
            tokens=self.T,
            dim=self.dim,
            total_quantized_bits=total_bits,
            baseline_bits_total=baseline_total,
            compression_ratio=baseline_total / total_bits,
            backing_fetches=self.backing_fetches,
            s_error_l2=err.get("s_l2", 0.0),
            x_error_l2=err.get("x_l2", 0.0),
            s_error_std=err.get("s_std", 0.0),
            x_error_std=err.get("x_std", 0.0),
            mean_bits_k=float(self._k.bits[: self.T].mean()),
            mean_bits_v=float(self._v.bits[: self.T].mean()),
            bit_histogram_k=_histogram(self._k.bits[: self.T]),
            bit_histogram_v=_histogram(self._v.bits[: self.T]),
        )

    # ---------------------------------------------------------- requantizing

    def _apply_bits(self, c, rows, new_bits, source):
        if rows.size == 0:
            return
        ranges = None
        if source == "backing_store":
            src = c.backing[rows]
        else:
            src = c.recon[rows]
            # Keep the stored range: power-of-two midpoint grids then nest, so
            # coding the reconstruction equals coding the original values.
            full = c.bits[rows] >= self.cfg.baseline_bits
            ranges = (np.where(full, c.range_lo[rows], c.vmin[rows]),
                      np.where(full, c.range_hi[rows], c.vmax[rows]))
        rq = quantize_rows(src, new_bits, self.cfg.alpha, self.cfg.outlier_budget,
                           self.cfg.baseline_bits, self.cfg.codec, ranges=ranges)
        c.codes[rows] = rq.codes
        c.mask[rows] = rq.mask
        c.vmin[rows] = rq.vmin
        c.vmax[rows] = rq.vmax
        c.recon[rows] = rq.recon
        c.bits[rows] = new_bits

    def _requantize(self, c, new_bits):
        cur = c.bits[: self.T]
        down = np.flatnonzero(new_bits < cur)
        up = np.flatnonzero(new_bits > cur)
        self._apply_bits(c, down, new_bits[down], self.cfg.requantize_source)
        self._apply_bits(c, up, new_bits[up], "backing_store")
        self.backing_fetches += int(up.size)

    def requantize_token(self, t, new_bits_k, new_bits_v):
        """Move token ``t`` to new bit widths under the one-way rule.

        Lowering works from the configured source; raising re-reads the
        backing store. Equal widths leave the entry untouched.
        """
        self._check_token(t)
        for c, b in ((self._k, new_bits_k), (self._v, new_bits_v)):
            if not 0 <= b <= self.cfg.baseline_bits:
                raise ValueError(f"bits {b} outside [0, {self.cfg.baseline_bits}]")
            bits = c.bits[: self.T].copy()
            bits[t] = b
            self._requantize(c, bits)

    # ------------------------------------------------------------------ step

    def _append(self, c, row):
        t = self.T
        c.backing[t] = row
        c.recon[t] = row
        c.codes[t] = 0
        c.mask[t] = False
        c.bits[t] = self.cfg.baseline_bits
        c.vmin[t] = c.vmax[t] = 0.0
        m = outlier_mask(row[None, :], self.cfg.alpha, self.cfg.outlier_budget)
        lo, hi = inlier_range(row[None, :], m)
        c.range_lo[t], c.range_hi[t] = lo[0], hi[0]

    def _update_calibration(self, q):
        if not self._online_calib:
            return
        if self.cfg.calib_mode == "streaming":
            self.calib.add(q)
        elif not self.calib.frozen:
            self.calib.add(q)
            if self.calib.sample_count >= max(self.cfg.calib_steps, 1):
                self.calib.freeze()

    def step(self, q, k, v):
        q = as_vector(q, "q")
        k = as_vector(k, "k")
        v = as_vector(v, "v")
        for name, arr in (("q", q), ("k", k), ("v", v)):
            if arr.shape[0] != self.dim:
                raise ValueError(f"{name} has D={arr.shape[0]}, engine expects D={self.dim}")
        self._update_calibration(q)
        self._ensure_capacity(self.T + 1)
        self._append(self._k, k)
        self._append(self._v, v)
        self.T += 1
        T = self.T

        # attention-time memory: cached tokens as stored, the new one at full precision
        total_bits = self.memory_bits()

        s = softmax(self._k.backing[:T] @ q)
        x = s @ self._v.backing[:T]
        s_hat = softmax(self._k.recon[:T] @ q)
        x_hat = s_hat @ self._v.recon[:T]
        ds = s_hat - s
        dx = x_hat - x
        self._last_errors = {
            "s_l2": float(np.linalg.norm(ds)),
            "x_l2": float(np.linalg.norm(dx)),
            "s_std": float(ds.std()),
            "x_std": float(dx.std()),
        }

        win = self._win[:T]
        win[:, :-1] = win[:, 1:]
        win[:, -1] = s_hat
        predicted = win.max(axis=1)

        k_ranges = np.stack([self._k.range_lo[:T], self._k.range_hi[:T]], axis=1)
        v_ranges = np.stack([self._v.range_lo[:T], self._v.range_hi[:T]], axis=1)
        # a lone token is sized as part of the two-token cache it joins next step;
        # the T = 1 sentinel would otherwise give it the minimum width
        bits_k, bits_v = allocate_bits(k_ranges, v_ranges, predicted, self.calib, self.cfg, T,
                                       dim=self.dim, horizon=max(T, 2))
        self._requantize(self._k, bits_k)
        self._requantize(self._v, bits_v)
        self.step_count += 1
        return StepResult(x_hat=x_hat, s_hat=s_hat, x=x, s=s, stats=self._stats(total_bits))

    # ------------------------------------------------------------------ dump

    def _dump_entry(self, t, which):
        e = self.entry(t, which)
        out = {"bits": e.bits, "vmin": e.vmin, "vmax": e.vmax, "outliers": e.outliers.entries}
        if e.full_precision:
            out["raw"] = e.raw.tolist()
        else:
            out["codes"] = pack_codes(e.codes, e.bits).hex()
        return out

    def to_state(self):
        """Self-describing, JSON-serialisable snapshot of the whole engine."""
        tokens = []
        for t in range(self.T):
            tokens.append({
                "k": self._dump_entry(t, "k"),
                "v": self._dump_entry(t, "v"),
                "backing_k": self._k.backing[t].tolist(),
                "backing_v": self._v.backing[t].tolist(),
                "window": self.window(t).scores,
            })
        return {
            "format": DUMP_FORMAT,
            "dim": self.dim,
            "config": self.cfg.to_dict(),
            "calibration": {
                "online": self._online_calib,
                "frozen": self.calib.frozen,
                "p": self.calib.p,
                "reservoir": self.calib.reservoir,
                "samples": list(self.calib.samples),
                "max_abs_samples": list(self.calib.max_abs_samples),
            },
            "T": self.T,
            "step_count": self.step_count,
            "backing_fetches": self.backing_fetches,
            "last_errors": self._last_errors,
            "tokens": tokens,
        }

    def dumps(self):
        return json.dumps(self.to_state(), sort_keys=True)

    @classmethod
    def from_state(cls, state):
        if state.get("format") != DUMP_FORMAT:
            raise ValueError("not an engine dump")
        cfg = QuantConfig.from_dict(state["config"])
        cal = state["calibration"]
        calib = QueryCalibration(p=cal["p"], reservoir=cal["reservoir"], samples=cal["samples"],
                                 max_abs_samples=cal["max_abs_samples"], frozen=cal["frozen"])
        eng = cls(state["dim"], cfg, calibration=calib)
        eng._online_calib = cal["online"]
        eng._ensure_capacity(max(state["T"], 1))
        D = eng.dim
        for t, tok in enumerate(state["tokens"]):
            for which in ("k", "v"):
                c = eng._cache(which)
                row = np.asarray(tok[f"backing_{which}"], dtype=np.float64)
                c.backing[t] = row
                m = outlier_mask(row[None, :], cfg.alpha, cfg.outlier_budget)
                lo, hi = inlier_range(row[None, :], m)
                c.range_lo[t], c.range_hi[t] = lo[0], hi[0]
                e = tok[which]
                mask = np.zeros(D, dtype=bool)
                recon = np.zeros(D)
                for i, val in e["outliers"]:
                    mask[i] = True
                    recon[i] = val
                kept = np.flatnonzero(~mask)
                codes = np.zeros(D, dtype=np.int64)
                if "raw" in e:
                    recon[kept] = e["raw"]
                else:
                    inl = unpack_codes(bytes.fromhex(e["codes"]), e["bits"], kept.size)
                    codes[kept] = inl
                    tokq = QuantizedToken(bits=e["bits"], vmin=e["vmin"], vmax=e["vmax"],
                                          codes=inl, outliers=OutlierSet(np.flatnonzero(mask),
                                                                         recon[mask]),
                                          dim=D, codec=cfg.codec)
                    recon = dequantize(tokq)
                c.recon[t] = recon
                c.codes[t] = codes
                c.mask[t] = mask
                c.vmin[t] = e["vmin"]
                c.vmax[t] = e["vmax"]
                c.bits[t] = e["bits"]
            w = tok["window"]
            eng._win[t, :] = -np.inf
            if w:
                eng._win[t, -len(w):] = w
        eng.T = state["T"]
        eng.step_count = state["step_count"]
        eng.backing_fetches = state["backing_fetches"]
        eng._last_errors = dict(state["last_errors"])
        return eng

    @classmethod
    def loads(cls, text):
        return cls.from_state(json.loads(text))
