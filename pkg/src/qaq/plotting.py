"""Optional PNG figures for run and sweep results.

matplotlib is imported lazily so the library and the delimited outputs work
without it. Figures use the Agg backend and carry no "Software" metadata,
so identical data give identical bytes.
"""

_STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "qaq",
}


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("--plot needs matplotlib (pip install matplotlib)") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})


def plot_run(rows, path):
    """Compression ratio and output error against step, one line per head."""
    plt = _pyplot()
    with plt.rc_context(_STYLE):
        fig, (ax_cr, ax_err) = plt.subplots(2, 1, sharex=True)
        heads = sorted({r["head"] for r in rows})
        for h in heads:
            sel = [r for r in rows if r["head"] == h]
            steps = [r["step"] for r in sel]
            ax_cr.plot(steps, [r["compression_ratio"] for r in sel], lw=1, label=f"head {h}")
            ax_err.plot(steps, [r["x_error_l2"] for r in sel], lw=1)
        ax_cr.set_ylabel("compression ratio")
        ax_err.set_ylabel("x error (L2)")
        ax_err.set_xlabel("step")
        if len(heads) > 1:
            ax_cr.legend(ncol=min(len(heads), 4))
        _save(fig, path)
        plt.close(fig)


def plot_sweep(rows, path):
    """Output error against compression ratio for each method."""
    plt = _pyplot()
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for method, marker in (("qaq", "o"), ("uniform", "s")):
            sel = sorted((r for r in rows if r["method"] == method),
                         key=lambda r: r["avg_compression_ratio"])
            ax.plot([r["avg_compression_ratio"] for r in sel], [r["avg_x_error"] for r in sel],
                    marker=marker, ms=4, lw=1, label=method)
        ax.set_xlabel("average compression ratio")
        ax.set_ylabel("average x error (L2)")
        ax.set_yscale("log")
        ax.legend()
        _save(fig, path)
        plt.close(fig)
