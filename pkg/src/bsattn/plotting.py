"""Matplotlib figures for bench sweeps and anneal schedules, written to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "bsattn",
}


def _save(fig, path):
    # strip timestamps so repeated runs give identical files
    metadata = {"Software": None} if str(path).endswith(".png") else {"Date": None}
    fig.savefig(path, bbox_inches="tight", metadata=metadata)
    plt.close(fig)


def plot_bench(rows, path):
    """FLOP reduction (and RMSE when present) against target sparsity."""
    s = [row["target_sparsity"] for row in rows]
    with plt.rc_context(_RC):
        has_rmse = any("rmse" in row for row in rows)
        fig, axes = plt.subplots(1, 2 if has_rmse else 1, figsize=(9 if has_rmse else 4.8, 3.4),
                                 squeeze=False)
        ax = axes[0, 0]
        ax.plot(s, [row["flop_ratio"] for row in rows], "o-", label="measured")
        ax.plot(s, [row["ref_ratio"] for row in rows], "k--", lw=1, label="1/(1-s)")
        ax.set_yscale("log")
        ax.set_xlabel("target sparsity")
        ax.set_ylabel("FLOP reduction (x)")
        ax.legend(frameon=False)
        if has_rmse:
            ax = axes[0, 1]
            ax.plot(s, [row.get("rmse", float("nan")) for row in rows], "s-", color="C3")
            ax.set_xlabel("target sparsity")
            ax.set_ylabel("RMSE vs dense")
        fig.tight_layout()
        _save(fig, path)


def plot_schedule(rows, path):
    steps = [row[0] for row in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.step(steps, [row[1] for row in rows], where="post", label="sparsity")
        ax.plot(steps, [row[4] for row in rows], label="k / N")
        ax.set_xlabel("training step")
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
