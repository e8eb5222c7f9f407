"""Synthetic query/key/value streams for single-head decoding.

Keys and values are i.i.d. per entry (normal or Student-t). Queries are a
fixed random direction plus a small per-step drift, scaled so that logits have
standard deviation about ``logit_scale``; with fixed keys this makes token
importance persist from step to step.

The ``spiky`` pattern marks each token with probability ``spike_rate``. A
marked token stays quiet until a random later onset step, then its logit is
raised by ``spike_gain`` at the onset and, with probability ``spike_duty``, at
each of the following ``spike_span`` steps. The boost is applied by moving the
query along ``k_t / |k_t|^2``, which shifts the token's logit by exactly the
gain and perturbs the others as a side effect.

Every head draws from its own ``PCG64`` stream seeded with ``(seed, head)``.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

DISTRIBUTIONS = ("normal", "student_t")
PATTERNS = ("persistent", "spiky")


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 0
    T_max: int = 256
    D: int = 16
    distribution: str = "normal"
    mu: float = 0.0
    sigma: float = 1.0
    nu: float = 3.0
    scale: float = 1.0
    attention_pattern: str = "persistent"
    spike_rate: float = 0.1
    spike_gain: float = 5.0
    spike_duty: float = 0.35
    spike_span: int = 12
    heads: int = 1
    logit_scale: float = 0.5
    query_drift: float = 0.1

    def __post_init__(self):
        if self.T_max < 2:
            raise ValueError("T_max must be >= 2")
        if self.D < 1 or self.heads < 1:
            raise ValueError("D and heads must be >= 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.attention_pattern not in PATTERNS:
            raise ValueError(f"attention_pattern must be one of {PATTERNS}")
        if not 0.0 <= self.spike_rate <= 1.0 or not 0.0 <= self.spike_duty <= 1.0:
            raise ValueError("spike_rate and spike_duty must lie in [0, 1]")
        if self.sigma <= 0 or self.scale <= 0 or self.nu <= 0:
            raise ValueError("sigma, scale and nu must be positive")
        if self.logit_scale < 0 or self.query_drift < 0 or self.spike_span < 0:
            raise ValueError("logit_scale, query_drift and spike_span must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown workload keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def entry_std(self):
        if self.distribution == "normal":
            return self.sigma
        if self.nu > 2:
            return self.scale * np.sqrt(self.nu / (self.nu - 2.0))
        return self.scale


@dataclass
class Workload:
    q: np.ndarray  # (T_max, D); q[t] is the query of step t
    k: np.ndarray
    v: np.ndarray
    spike_onset: np.ndarray  # (T_max,), -1 for tokens that never spike
    boosts: list  # boosts[t]: token indices boosted at step t

    def __iter__(self):
        return iter(zip(self.q, self.k, self.v))

    def __len__(self):
        return self.q.shape[0]


def head_rng(seed, head):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, head])))


def _entries(rng, spec, shape):
    if spec.distribution == "normal":
        return spec.mu + spec.sigma * rng.standard_normal(shape)
    return spec.mu + spec.scale * rng.standard_t(spec.nu, shape)


def generate_workload(spec, head=0):
    rng = head_rng(spec.seed, head)
    T, D = spec.T_max, spec.D
    k = _entries(rng, spec, (T, D))
    v = _entries(rng, spec, (T, D))
    unit = spec.logit_scale / (spec.entry_std * np.sqrt(D))
    base = rng.standard_normal(D) * unit
    q = base + spec.query_drift * unit * rng.standard_normal((T, D))

    onset = np.full(T, -1, dtype=np.int64)
    boosts = [[] for _ in range(T)]
    if spec.attention_pattern == "spiky":
        marked = rng.random(T) < spec.spike_rate
        onset_draw = rng.random(T)
        duty = rng.random((T, spec.spike_span))
        for t in np.flatnonzero(marked):
            first = t + 2
            if first >= T:
                continue
            tau = first + int(onset_draw[t] * (T - first))
            onset[t] = tau
            steps = [tau] + [tau + 1 + j for j in range(spec.spike_span)
                             if duty[t, j] < spec.spike_duty and tau + 1 + j < T]
            for step in steps:
                boosts[step].append(int(t))
        for step, toks in enumerate(boosts):
            for t in toks:
                kt = k[t]
                q[step] += spec.spike_gain * kt / (kt @ kt)
    return Workload(q=q, k=k, v=v, spike_onset=onset, boosts=boosts)
