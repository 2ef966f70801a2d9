"""Figure rendering for traces and metric reports (written next to the CSVs)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_trace_figure(trace, path):
    """Objective values and gradient norm across reverse steps."""
    steps = [r["t"] for r in trace.records]
    fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6, 5))
    ax1.plot(steps, [r["l_dist"] for r in trace.records], label="L_dist", marker=".")
    if any(r["l_cycle"] for r in trace.records):
        ax1.plot(steps, [r["l_cycle"] for r in trace.records], label="L_cycle",
                 marker=".")
    ax1.set_ylabel("objective")
    ax1.legend(loc="best", fontsize=8)
    ax2.plot(steps, [r["grad_norm"] for r in trace.records], color="tab:red",
             marker=".")
    ax2.set_ylabel("grad norm")
    ax2.set_xlabel("level t")
    ax2.invert_xaxis()  # reverse process runs from high noise to clean data
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_report_figure(report, path):
    """Per-pair metric values with aggregate-mean lines."""
    agg = report.aggregates()
    idx = range(len(report.rows))
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    panels = [("CS", [r.cs for r in report.rows], agg["mean_cs"]),
              ("SD", [r.sd for r in report.rows], agg["mean_sd"]),
              ("BD", [None if r.bd is None else r.bd for r in report.rows],
               agg["mean_bd"])]
    for ax, (name, values, mean) in zip(axes, panels):
        xs = [i for i, v in zip(idx, values) if v is not None]
        ys = [v for v in values if v is not None]
        ax.bar(xs, ys, color="tab:blue")
        if mean is not None and ys:
            ax.axhline(mean, color="tab:orange", linestyle="--", linewidth=1,
                       label=f"mean={mean:.4g}")
            ax.legend(fontsize=7)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("pair")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
