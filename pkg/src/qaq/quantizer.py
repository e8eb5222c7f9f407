"""Per-token scalar codecs and bit-width rules.

Two uniform codecs share the token's inlier range ``[vmin, vmax]``:

* ``"midpoint"`` splits the range into ``2**B`` equal segments and rounds to
  segment midpoints, so the error is bounded by ``range / 2**(B+1)``.
* ``"endpoint"`` places ``2**B`` levels on a grid of ``2**B - 1`` segments
  including both ends; the error is bounded by ``range / (2 * (2**B - 1))``.

A token whose bit width reaches ``baseline_bits`` is stored unquantized.
``B = 0`` is reserved for constant tokens and stores only the constant.

Packed code layout: codes are written LSB-first into a little-endian bit
stream, ``B`` bits per code, and the token is padded to a whole byte.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from qaq import outliers as _outliers
from qaq.outliers import OutlierSet
from qaq.special import norm_ppf

# Mean-absolute-error coefficient of the normal-quantile quantizer: MAE = c_b * sigma.
NORMAL_COEFFS = {
    1: 0.473222,
    2: 0.271204,
    3: 0.151629,
    4: 0.0832674,
    5: 0.0451210,
    6: 0.0242022,
    7: 0.0128782,
    8: 0.00680873,
}

CODECS = ("midpoint", "endpoint")
_SQRT3 = math.sqrt(3.0)
# Absorbs rounding so that exact powers of two do not ceil up one bit.
_LOG_EPS = 1e-9


@dataclass
class QuantizedToken:
    bits: int
    vmin: float
    vmax: float
    codes: np.ndarray
    outliers: OutlierSet = field(default_factory=OutlierSet)
    dim: int = 0
    codec: str = "midpoint"
    raw: np.ndarray | None = None  # inlier values, only for full-precision tokens

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.size + self.outliers.count != self.dim:
            raise ValueError("code count plus outlier count must equal dim")
        if self.vmin > self.vmax:
            raise ValueError("vmin > vmax")

    @property
    def full_precision(self):
        return self.raw is not None

    def kept_index(self):
        mask = np.ones(self.dim, dtype=bool)
        mask[self.outliers.indices] = False
        return np.flatnonzero(mask)


def _segment_codes(values, bits, vmin, vmax, codec):
    levels = 2 ** bits
    width = vmax - vmin
    rel = (np.clip(values, vmin, vmax) - vmin) / width
    if codec == "midpoint":
        codes = np.floor(rel * levels)
    elif codec == "endpoint":
        codes = np.rint(rel * (levels - 1))
    else:
        raise ValueError(f"unknown codec {codec!r}")
    return np.clip(codes, 0, levels - 1).astype(np.int64)


def _segment_values(codes, bits, vmin, vmax, codec):
    levels = 2 ** bits
    width = vmax - vmin
    if codec == "midpoint":
        return vmin + (codes + 0.5) * (width / levels)
    if codec == "endpoint":
        return vmin + codes * (width / (levels - 1))
    raise ValueError(f"unknown codec {codec!r}")


def uniform_quantize(values, bits, vmin, vmax, baseline_bits=16, codec="midpoint"):
    """Codes for ``values`` on ``2**bits`` segments of ``[vmin, vmax]``.

    Inputs outside the range are clamped first; a value equal to ``vmax``
    lands in the last segment.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1; constant tokens use the B=0 path")
    if bits > baseline_bits:
        raise ValueError(f"bits={bits} exceeds baseline_bits={baseline_bits}")
    if not vmin < vmax:
        raise ValueError("degenerate range")
    return _segment_codes(np.asarray(values, dtype=np.float64), bits, vmin, vmax, codec)


def uniform_dequantize(codes, bits, vmin, vmax, codec="midpoint"):
    codes = np.asarray(codes, dtype=np.int64)
    if bits == 0:
        return np.full(codes.shape, float(vmin))
    if codes.size and (codes.min() < 0 or codes.max() >= 2 ** bits):
        raise ValueError(f"corrupted code: expected values below 2**{bits}")
    return _segment_values(codes, bits, vmin, vmax, codec)


def uniform_quantize_endpoint(values, bits, vmin, vmax, baseline_bits=16):
    """The ``2**B - 1`` segment variant."""
    return uniform_quantize(values, bits, vmin, vmax, baseline_bits, codec="endpoint")


def max_error(bits, value_range, codec="midpoint"):
    if bits == 0:
        return 0.0
    if codec == "midpoint":
        return value_range / 2 ** (bits + 1)
    return value_range / (2 * (2 ** bits - 1))


@dataclass
class RowQuantization:
    """Vectorised quantization of many tokens of one cache."""
    codes: np.ndarray  # (N, D); zero at outlier positions and full-precision rows
    mask: np.ndarray   # (N, D) outlier mask
    vmin: np.ndarray
    vmax: np.ndarray
    recon: np.ndarray  # (N, D)


def quantize_rows(values, bits, alpha=0.0, budget="per_end", baseline_bits=16, codec="midpoint",
                  ranges=None):
    """Quantize each row of ``values`` at its own bit width.

    Full-precision rows (``bits >= baseline_bits``) skip outlier extraction:
    every entry is already stored at baseline precision. Rows whose inlier
    range is degenerate reconstruct to the constant regardless of ``bits``.
    ``ranges`` optionally supplies ``(vmin, vmax)`` arrays to code against
    instead of the measured inlier range.
    """
    values = np.asarray(values, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.int64)
    n, dim = values.shape
    full = bits >= baseline_bits
    mask = _outliers.outlier_mask(values, alpha, budget)
    mask[full] = False
    if ranges is None:
        vmin, vmax = _outliers.inlier_range(values, mask)
    else:
        vmin = np.array(ranges[0], dtype=np.float64)
        vmax = np.array(ranges[1], dtype=np.float64)
    codes = np.zeros((n, dim), dtype=np.int64)
    recon = values.copy()
    quant = (~full) & (bits > 0) & (vmax > vmin)
    const = (~full) & ~quant
    if np.any(const):
        recon[const] = np.where(mask[const], values[const], vmin[const][:, None])
    for b in np.unique(bits[quant]):
        rows = np.flatnonzero(quant & (bits == b))
        lo = vmin[rows][:, None]
        hi = vmax[rows][:, None]
        c = _segment_codes(values[rows], int(b), lo, hi, codec)
        r = _segment_values(c, int(b), lo, hi, codec)
        m = mask[rows]
        codes[rows] = np.where(m, 0, c)
        recon[rows] = np.where(m, values[rows], r)
    return RowQuantization(codes=codes, mask=mask, vmin=vmin, vmax=vmax, recon=recon)


def quantize_token(values, bits, alpha=0.0, budget="per_end", baseline_bits=16, codec="midpoint"):
    """Outlier extraction followed by uniform coding of one token."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("values must be a nonempty vector")
    if not 0 <= bits <= baseline_bits:
        raise ValueError(f"bits must lie in [0, {baseline_bits}]")
    rq = quantize_rows(values[None, :], [bits], alpha, budget, baseline_bits, codec)
    mask = rq.mask[0]
    kept = ~mask
    idx = np.flatnonzero(mask)
    vmin, vmax = float(rq.vmin[0]), float(rq.vmax[0])
    full = bits >= baseline_bits
    stored_bits = int(bits)
    if not full and vmin == vmax:
        stored_bits = 0
    return QuantizedToken(
        bits=stored_bits,
        vmin=vmin,
        vmax=vmax,
        codes=rq.codes[0][kept],
        outliers=OutlierSet(idx, values[idx]),
        dim=values.size,
        codec=codec,
        raw=values[kept].copy() if full else None,
    )


def dequantize(qt):
    if qt.full_precision:
        inliers = np.asarray(qt.raw, dtype=np.float64)
    else:
        inliers = uniform_dequantize(qt.codes, qt.bits, qt.vmin, qt.vmax, qt.codec)
    return _outliers.merge_outliers(inliers, qt.kept_index(), qt.outliers)


def _finish_bits(raw, value_range, target, bmin, bmax, full_bits):
    value_range = np.asarray(value_range, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    raw = np.asarray(raw, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        bits = np.clip(np.ceil(raw - _LOG_EPS), bmin, bmax)
    bits = np.where(np.isinf(target), bmin, bits)
    bits = np.where(target <= 0, full_bits, bits)
    bits = np.where(value_range == 0, 0, bits)
    out = bits.astype(np.int64)
    return int(out) if out.ndim == 0 else out


def bits_for_std(value_range, sigma, bmin=1, bmax=16, full_bits=16):
    """Fewest midpoint-codec bits whose error std stays below ``sigma``.

    ``ceil(log2(range / (2 * sqrt(3) * sigma)))`` clamped to ``[bmin, bmax]``.
    ``sigma = inf`` gives ``bmin``, ``sigma <= 0`` gives ``full_bits``
    (unquantized storage) and a zero range gives 0. Works elementwise on arrays.
    """
    value_range = np.asarray(value_range, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(value_range < 0):
        raise ValueError("negative range")
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.log2(value_range / (2.0 * _SQRT3 * sigma))
    return _finish_bits(raw, value_range, sigma, bmin, bmax, full_bits)


def bits_for_mae_uniform(value_range, mae, bmin=1, bmax=16, full_bits=16):
    """``ceil(log2(range / (2 * mae) + 1))`` with the same sentinel rules as :func:`bits_for_std`."""
    value_range = np.asarray(value_range, dtype=np.float64)
    mae = np.asarray(mae, dtype=np.float64)
    if np.any(value_range < 0):
        raise ValueError("negative range")
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.log2(value_range / (2.0 * mae) + 1.0)
    return _finish_bits(raw, value_range, mae, bmin, bmax, full_bits)


def normal_coeff(bits, table=None):
    table = NORMAL_COEFFS if table is None else table
    if bits not in table:
        raise ValueError(f"unsupported bit width {bits}")
    return table[bits]


def bits_for_mae_normal(sigma, mae, full_bits=16, table=None):
    """Smallest table bit width whose MAE ``c_b * sigma`` is within ``mae``."""
    if sigma <= 0 or mae <= 0:
        raise ValueError("sigma and mae must be positive")
    table = NORMAL_COEFFS if table is None else table
    for b in sorted(table):
        if table[b] * sigma <= mae:
            return b
    return full_bits


def _normal_boundaries(bits, sigma):
    levels = 2 ** bits
    return sigma * norm_ppf(np.arange(1, levels) / levels)


def normal_quantize(values, bits, sigma):
    """Codes on the ``2**bits`` equal-probability cells of N(0, sigma)."""
    if bits not in NORMAL_COEFFS:
        raise ValueError(f"unsupported bit width {bits}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    values = np.asarray(values, dtype=np.float64)
    return np.searchsorted(_normal_boundaries(bits, sigma), values, side="right").astype(np.int64)


def normal_dequantize(codes, bits, sigma):
    levels = 2 ** bits
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= levels):
        raise ValueError(f"corrupted code: expected values below 2**{bits}")
    return sigma * norm_ppf((codes + 0.5) / levels)


def pack_codes(codes, bits):
    codes = np.asarray(codes, dtype=np.int64)
    if bits == 0 or codes.size == 0:
        return b""
    if codes.min() < 0 or codes.max() >= 2 ** bits:
        raise ValueError(f"code does not fit in {bits} bits")
    planes = (codes[:, None] >> np.arange(bits)) & 1
    return np.packbits(planes.astype(np.uint8).reshape(-1), bitorder="little").tobytes()


def unpack_codes(data, bits, count):
    if bits == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    need = math.ceil(bits * count / 8)
    if len(data) != need:
        raise ValueError(f"expected {need} packed bytes, got {len(data)}")
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    planes = flat[: bits * count].reshape(count, bits).astype(np.int64)
    return planes @ (1 << np.arange(bits, dtype=np.int64))
