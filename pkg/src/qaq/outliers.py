"""Two-sided outlier extraction with a full-precision sparse sidecar.

Outliers are chosen per token over its D values: the ``ceil(alpha * D)``
largest and the ``ceil(alpha * D)`` smallest entries, ties going to the lower
index. In ``"total"`` budget mode each end gets ``ceil(alpha * D / 2)``.

Sidecar wire format (little-endian)::

    u32 count
    count x (u32 index, value)

where ``value`` is IEEE half, single or double precision for a baseline of
16, 32 or 64 bits.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

_VALUE_FORMATS = {16: "e", 32: "f", 64: "d"}


@dataclass(frozen=True)
class OutlierSet:
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float64))

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        if idx.shape != vals.shape or idx.ndim != 1:
            raise ValueError("corrupt outlier set")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("corrupt outlier set")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def count(self):
        return int(self.indices.size)

    @property
    def entries(self):
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def __eq__(self, other):
        if not isinstance(other, OutlierSet):
            return NotImplemented
        return (np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))


def per_end_count(alpha, dim, budget="per_end"):
    if not 0.0 <= alpha < 0.5:
        raise ValueError(f"alpha must lie in [0, 0.5), got {alpha}")
    if alpha == 0.0:
        return 0
    if budget == "per_end":
        return math.ceil(alpha * dim)
    if budget == "total":
        return math.ceil(alpha * dim / 2.0)
    raise ValueError(f"unknown outlier budget {budget!r}")


def outlier_mask(values, alpha, budget="per_end"):
    """Boolean outlier mask for each row of a (N, D) array.

    Constant rows never yield outliers.
    """
    values = np.asarray(values, dtype=np.float64)
    n, dim = values.shape
    k = per_end_count(alpha, dim, budget)
    mask = np.zeros((n, dim), dtype=bool)
    if k == 0:
        return mask
    if 2 * k >= dim:
        mask[:] = True
    else:
        rows = np.arange(n)[:, None]
        low = np.argsort(values, axis=1, kind="stable")[:, :k]
        high = np.argsort(-values, axis=1, kind="stable")[:, :k]
        mask[rows, low] = True
        mask[rows, high] = True
    constant = values.max(axis=1) == values.min(axis=1)
    mask[constant] = False
    return mask


def inlier_range(values, mask):
    """(vmin, vmax) over non-outlier entries per row; all-outlier rows give (0, 0)."""
    values = np.asarray(values, dtype=np.float64)
    lo = np.where(mask, np.inf, values).min(axis=1)
    hi = np.where(mask, -np.inf, values).max(axis=1)
    empty = mask.all(axis=1)
    lo[empty] = 0.0
    hi[empty] = 0.0
    return lo, hi


def extract_outliers(values, alpha, budget="per_end"):
    """Split one token into inliers and a sidecar of outliers.

    Returns ``(inliers, kept_index, outliers, (vmin, vmax))`` where
    ``kept_index[i]`` is the original dimension of ``inliers[i]``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("values must be a nonempty vector")
    mask = outlier_mask(values[None, :], alpha, budget)[0]
    kept = np.flatnonzero(~mask)
    idx = np.flatnonzero(mask)
    lo, hi = inlier_range(values[None, :], mask[None, :])
    return values[kept], kept, OutlierSet(idx, values[idx]), (float(lo[0]), float(hi[0]))


def merge_outliers(inlier_recon, kept_index, outliers):
    inlier_recon = np.asarray(inlier_recon, dtype=np.float64)
    kept_index = np.asarray(kept_index, dtype=np.int64)
    if inlier_recon.shape != kept_index.shape:
        raise ValueError("inlier values and kept-index map differ in length")
    dim = kept_index.size + outliers.count
    out = np.full(dim, np.nan)
    filled = np.zeros(dim, dtype=bool)
    for idx in (kept_index, outliers.indices):
        if idx.size and (idx.min() < 0 or idx.max() >= dim):
            raise ValueError("corrupt outlier set")
        if np.any(filled[idx]) or np.unique(idx).size != idx.size:
            raise ValueError("corrupt outlier set")
        filled[idx] = True
    out[kept_index] = inlier_recon
    out[outliers.indices] = outliers.values
    return out


def sidecar_bits(count, dim, baseline_bits=16):
    """Memory charged for ``count`` outliers: index plus baseline-precision value each."""
    index_bits = math.ceil(math.log2(dim)) if dim > 1 else 0
    return count * (index_bits + baseline_bits)


def serialize_outliers(outliers, baseline_bits=16):
    fmt = _VALUE_FORMATS.get(baseline_bits)
    if fmt is None:
        raise ValueError(f"no IEEE format for baseline_bits={baseline_bits}")
    parts = [struct.pack("<I", outliers.count)]
    for i, v in zip(outliers.indices.tolist(), outliers.values.tolist()):
        parts.append(struct.pack("<I" + fmt, i, v))
    return b"".join(parts)


def deserialize_outliers(data, baseline_bits=16):
    fmt = _VALUE_FORMATS.get(baseline_bits)
    if fmt is None:
        raise ValueError(f"no IEEE format for baseline_bits={baseline_bits}")
    (count,) = struct.unpack_from("<I", data, 0)
    rec = struct.Struct("<I" + fmt)
    if len(data) != 4 + count * rec.size:
        raise ValueError("truncated outlier sidecar")
    idx, vals = [], []
    for n in range(count):
        i, v = rec.unpack_from(data, 4 + n * rec.size)
        idx.append(i)
        vals.append(v)
    return OutlierSet(np.array(idx, dtype=np.int64), np.array(vals, dtype=np.float64))
