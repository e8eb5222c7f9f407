"""Command-line entry point: ``qaq {run,sweep,verify,calibrate}``.

The config is one JSON document with optional sections ``workload``,
``quant``, ``sweep`` and ``output``. ``--seed`` overrides ``workload.seed``
(and seeds the oracle suite for ``verify``); ``--out`` overrides
``output.dir``. Exit status is 0 on success, 1 when a verified claim fails
and 2 on configuration or I/O errors.
"""

import argparse
import json
import os
import sys

from qaq import experiment, oracle
from qaq.allocator import QuantConfig
from qaq.workload import WorkloadSpec

SECTIONS = ("workload", "quant", "sweep", "output")


class ConfigError(Exception):
    pass


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def build(config, seed=None):
    try:
        wl = dict(config.get("workload", {}))
        if seed is not None:
            wl["seed"] = seed
        spec = WorkloadSpec.from_dict(wl)
        cfg = QuantConfig.from_dict(config.get("quant", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return spec, cfg


def _out_dir(args, config):
    out = args.out or config.get("output", {}).get("dir") or "out"
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _want_plot(args, config):
    return bool(args.plot or config.get("output", {}).get("plot", False))


def _precompute(config):
    return bool(config.get("output", {}).get("precompute_calibration", True))


def cmd_run(args, config):
    spec, cfg = build(config, args.seed)
    out = _out_dir(args, config)
    result = experiment.run(spec, cfg, precompute=_precompute(config))
    experiment.write_text(os.path.join(out, "run.csv"),
                          experiment.rows_to_csv(result.rows, experiment.CSV_COLUMNS))
    summary = {"workload": spec.to_dict(), "quant": cfg.to_dict(), "summary": result.summary}
    experiment.write_text(os.path.join(out, "run_summary.json"), experiment.dump_json(summary))
    if _want_plot(args, config):
        from qaq.plotting import plot_run
        plot_run(result.rows, os.path.join(out, "run.png"))
    print(f"{len(result.rows)} rows -> {os.path.join(out, 'run.csv')}")
    print(f"mean compression ratio {result.summary['mean_compression_ratio']:.4f}, "
          f"mean x error {result.summary['mean_x_error_l2']:.4g}")
    return 0


def cmd_sweep(args, config):
    spec, cfg = build(config, args.seed)
    out = _out_dir(args, config)
    grid = config.get("sweep")
    try:
        rows = experiment.sweep(spec, cfg, grid, precompute=_precompute(config))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    experiment.write_text(os.path.join(out, "sweep.csv"),
                          experiment.rows_to_csv(rows, experiment.SWEEP_COLUMNS))
    pairs = len(rows) // 2
    wins = sum(rows[2 * i]["avg_x_error"] <= rows[2 * i + 1]["avg_x_error"] for i in range(pairs))
    summary = {"workload": spec.to_dict(), "quant": cfg.to_dict(), "grid": grid,
               "points": pairs, "qaq_not_worse": wins}
    experiment.write_text(os.path.join(out, "sweep_summary.json"), experiment.dump_json(summary))
    if _want_plot(args, config):
        from qaq.plotting import plot_sweep
        plot_sweep(rows, os.path.join(out, "sweep.png"))
    print(f"{pairs} grid points -> {os.path.join(out, 'sweep.csv')}; "
          f"qaq x error <= uniform at {wins}/{pairs}")
    return 0


def _coeff_table(path):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return {int(k): float(v) for k, v in raw.items()}
    except (OSError, ValueError, AttributeError) as exc:
        raise ConfigError(f"bad coefficient table {path}: {exc}") from exc


def cmd_verify(args, config):
    out = _out_dir(args, config)
    seed = 0 if args.seed is None else args.seed
    reports = oracle.run_suite(args.filter, seed=seed, coeff_table=_coeff_table(args.coeff_table))
    if not reports:
        raise ConfigError(f"no claims match filter {args.filter!r}")
    sys.stdout.write(oracle.format_table(reports))
    payload = {"seed": seed, "filter": args.filter, "reports": [r.to_dict() for r in reports]}
    experiment.write_text(os.path.join(out, "verify.json"), experiment.dump_json(payload))
    return 0 if all(r.passed for r in reports) else 1


def cmd_calibrate(args, config):
    spec, cfg = build(config, args.seed)
    out = _out_dir(args, config)
    heads = experiment.calibrate(spec, cfg)
    payload = {"workload": spec.to_dict(), "p": cfg.query_quantile_p,
               "calib_steps": cfg.calib_steps, "heads": heads}
    experiment.write_text(os.path.join(out, "calibration.json"), experiment.dump_json(payload))
    for h in heads:
        print(f"head {h['head']}: quantile |q|^2 = {h['quantile_value']:.6g}, "
              f"quantile max|q| = {h['max_abs_quantile']:.6g}")
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "calibrate": cmd_calibrate}


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def make_parser():
    parser = argparse.ArgumentParser(prog="qaq", description="Quality-adaptive KV cache quantization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "run the engine over a synthetic workload"),
                            ("sweep", "compare against a bit-matched uniform baseline over a budget grid"),
                            ("verify", "run the Monte-Carlo and quadrature oracle suite"),
                            ("calibrate", "measure query-norm calibration per head")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config with workload/quant/sweep/output sections")
        p.add_argument("--seed", type=_seed, help="override the workload (or oracle) seed")
        p.add_argument("--out", help="output directory (default: output.dir or ./out)")
        if name in ("run", "sweep"):
            p.add_argument("--plot", action="store_true", help="also write a PNG figure (needs matplotlib)")
        if name == "verify":
            p.add_argument("--filter", help="claim-id glob; a bare word matches as a substring")
            p.add_argument("--coeff-table", help="JSON {bits: coefficient} to check instead of the built-in table")
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"qaq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"qaq {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
