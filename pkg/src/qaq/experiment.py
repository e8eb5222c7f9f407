"""Engine runs over synthetic workloads, sweeps and result files.

Per-step CSV columns, in this order::

    step,head,compression_ratio,s_error_l2,x_error_l2,backing_fetches,mean_bits_k,mean_bits_v

``step`` is 1-based (it equals the cache length T after the step),
``compression_ratio`` is measured on the cache the step attended over, and
``backing_fetches`` is cumulative per head. Floats are written with ``repr``
so that identical runs give identical bytes.
"""

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from qaq.allocator import QuantConfig, calibrate_query_norm
from qaq.engine import KVCacheEngine
from qaq.workload import WorkloadSpec, generate_workload

CSV_COLUMNS = ("step", "head", "compression_ratio", "s_error_l2", "x_error_l2",
               "backing_fetches", "mean_bits_k", "mean_bits_v")
SWEEP_COLUMNS = ("point", "method", "sigma_s_max", "sigma_x_max", "mean_bits_k", "mean_bits_v",
                 "avg_compression_ratio", "avg_x_error", "avg_s_error", "backing_fetches")
DEFAULT_SWEEP_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass
class HeadResult:
    head: int
    rows: list
    s_error_std: np.ndarray
    bits_k_total: int
    bits_v_total: int
    token_steps: int
    spike_s_error: float | None = None

    @property
    def mean_bits_k(self):
        return self.bits_k_total / self.token_steps

    @property
    def mean_bits_v(self):
        return self.bits_v_total / self.token_steps


@dataclass
class RunResult:
    heads: list
    workload: WorkloadSpec
    quant: QuantConfig
    summary: dict = field(default_factory=dict)

    @property
    def rows(self):
        return [r for h in self.heads for r in h.rows]


def precompute_calibration(wl, cfg):
    n = max(cfg.calib_steps, 1)
    return calibrate_query_norm(wl.q[:n], cfg.query_quantile_p)


def run_head(spec, cfg, head=0, precompute=True):
    """Drive one engine through one head's workload.

    With ``precompute`` (the default) the query calibration is measured on the
    first ``cfg.calib_steps`` queries before the run and then frozen;
    otherwise the engine calibrates online.
    """
    wl = generate_workload(spec, head)
    calib = precompute_calibration(wl, cfg) if precompute and cfg.calib_mode == "warmup" else None
    eng = KVCacheEngine(spec.D, cfg, calibration=calib)
    rows = []
    s_std = np.zeros(len(wl))
    bits_k = bits_v = steps_tokens = 0
    spiky = spec.attention_pattern == "spiky"
    spike_err = 0.0
    spike_n = 0
    for i, (q, k, v) in enumerate(wl):
        res = eng.step(q, k, v)
        st = res.stats
        bk = eng.bits("k")
        bv = eng.bits("v")
        bits_k += int(bk.sum())
        bits_v += int(bv.sum())
        steps_tokens += eng.T
        s_std[i] = st.s_error_std
        if spiky:
            live = np.flatnonzero((wl.spike_onset[: eng.T] >= 0) & (wl.spike_onset[: eng.T] <= i))
            if live.size:
                spike_err += float(np.abs(res.s_hat[live] - res.s[live]).sum())
                spike_n += live.size
        rows.append({
            "step": i + 1,
            "head": head,
            "compression_ratio": st.compression_ratio,
            "s_error_l2": st.s_error_l2,
            "x_error_l2": st.x_error_l2,
            "backing_fetches": st.backing_fetches,
            "mean_bits_k": float(bk.mean()),
            "mean_bits_v": float(bv.mean()),
        })
    return HeadResult(head=head, rows=rows, s_error_std=s_std, bits_k_total=bits_k,
                      bits_v_total=bits_v, token_steps=steps_tokens,
                      spike_s_error=(spike_err / spike_n if spike_n else None) if spiky else None)


def _worker_count(n_tasks):
    env = os.environ.get("QAQ_THREADS")
    cap = int(env) if env else 1
    if cap < 1:
        raise ValueError("QAQ_THREADS must be >= 1")
    return max(1, min(cap, n_tasks))


def _run_head_args(args):
    return run_head(*args)


def summarize(heads, cfg):
    rows = [r for h in heads for r in h.rows]
    stds = np.concatenate([h.s_error_std for h in heads])
    token_steps = sum(h.token_steps for h in heads)
    out = {
        "steps": len(heads[0].rows),
        "heads": len(heads),
        "mean_compression_ratio": float(np.mean([r["compression_ratio"] for r in rows])),
        "final_compression_ratio": float(np.mean([h.rows[-1]["compression_ratio"] for h in heads])),
        "mean_s_error_l2": float(np.mean([r["s_error_l2"] for r in rows])),
        "mean_x_error_l2": float(np.mean([r["x_error_l2"] for r in rows])),
        "backing_fetches": int(sum(h.rows[-1]["backing_fetches"] for h in heads)),
        "mean_bits_k": sum(h.bits_k_total for h in heads) / token_steps,
        "mean_bits_v": sum(h.bits_v_total for h in heads) / token_steps,
        "s_budget_compliance": float(np.mean(stds <= cfg.sigma_s_max)),
    }
    spikes = [h.spike_s_error for h in heads if h.spike_s_error is not None]
    if spikes:
        out["spike_s_error"] = float(np.mean(spikes))
    return out


def run(spec, cfg, precompute=True):
    """Run every head; heads are independent and merged in head order."""
    tasks = [(spec, cfg, h, precompute) for h in range(spec.heads)]
    workers = _worker_count(len(tasks))
    if workers == 1:
        heads = [run_head(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            heads = list(pool.map(_run_head_args, tasks))
    return RunResult(heads=heads, workload=spec, quant=cfg, summary=summarize(heads, cfg))


def matched_uniform_config(cfg, mean_bits_k, mean_bits_v):
    """Same cache settings with every token at the rounded mean QAQ bit widths."""
    def rounded(m):
        return int(min(max(math.floor(m + 0.5), 1), cfg.baseline_bits))
    return replace(cfg, bit_policy="uniform", uniform_bits_k=rounded(mean_bits_k),
                   uniform_bits_v=rounded(mean_bits_v))


def sweep_points(base_cfg, grid=None):
    """Grid of ``(sigma_s_max, sigma_x_max)`` pairs.

    ``grid`` may hold explicit ``points`` or two lists under ``sigma_s_max``
    and ``sigma_x_max`` combined with ``mode`` ``"paired"`` (default) or
    ``"product"``. Without a grid the base budgets are scaled by
    ``DEFAULT_SWEEP_SCALES``.
    """
    if not grid:
        return [(base_cfg.sigma_s_max * c, base_cfg.sigma_x_max * c) for c in DEFAULT_SWEEP_SCALES]
    if "points" in grid:
        pts = [tuple(map(float, p)) for p in grid["points"]]
    else:
        ss = [float(x) for x in grid.get("sigma_s_max", [base_cfg.sigma_s_max])]
        sx = [float(x) for x in grid.get("sigma_x_max", [base_cfg.sigma_x_max])]
        mode = grid.get("mode", "paired")
        if mode == "paired":
            if len(ss) == 1:
                ss = ss * len(sx)
            if len(sx) == 1:
                sx = sx * len(ss)
            if len(ss) != len(sx):
                raise ValueError("paired sweep needs equally long sigma lists")
            pts = list(zip(ss, sx))
        elif mode == "product":
            pts = [(a, b) for a in ss for b in sx]
        else:
            raise ValueError(f"unknown sweep mode {mode!r}")
    if not pts:
        raise ValueError("empty sweep grid")
    return pts


def _sweep_row(point, method, cfg, result):
    s = result.summary
    return {
        "point": point,
        "method": method,
        "sigma_s_max": cfg.sigma_s_max,
        "sigma_x_max": cfg.sigma_x_max,
        "mean_bits_k": s["mean_bits_k"],
        "mean_bits_v": s["mean_bits_v"],
        "avg_compression_ratio": s["mean_compression_ratio"],
        "avg_x_error": s["mean_x_error_l2"],
        "avg_s_error": s["mean_s_error_l2"],
        "backing_fetches": s["backing_fetches"],
    }


def sweep(spec, base_cfg, grid=None, precompute=True):
    """QAQ and a bit-matched uniform baseline at every grid point."""
    rows = []
    for i, (ss, sx) in enumerate(sweep_points(base_cfg, grid)):
        cfg = replace(base_cfg, sigma_s_max=ss, sigma_x_max=sx, bit_policy="qaq")
        qaq = run(spec, cfg, precompute)
        uni_cfg = matched_uniform_config(cfg, qaq.summary["mean_bits_k"], qaq.summary["mean_bits_v"])
        uni = run(spec, uni_cfg, precompute)
        rows.append(_sweep_row(i, "qaq", cfg, qaq))
        rows.append(_sweep_row(i, "uniform", uni_cfg, uni))
    return rows


def calibrate(spec, cfg):
    """Query calibration per head from the first ``calib_steps`` queries."""
    out = []
    for h in range(spec.heads):
        wl = generate_workload(spec, h)
        c = precompute_calibration(wl, cfg)
        out.append({"head": h, **c.to_dict()})
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
