"""Figure rendering for the CSV artifacts the harness writes.

Each function reads one delimited file and writes one PNG next to it;
nothing here feeds back into training or analysis. Rendering uses the
Agg backend so it works without a display.
"""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import analyze
from . import train as tr

_STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
}


def render_history_figure(history_csv, out_png):
    """Loss curves and validation accuracy from a history.csv."""
    history = tr.read_history_csv(history_csv)
    epochs = [h.epoch for h in history]
    with plt.rc_context(_STYLE):
        has_val = any(not math.isnan(h.val_acc) for h in history)
        fig, axes = plt.subplots(1, 2 if has_val else 1,
                                 figsize=(9 if has_val else 5, 3.4))
        ax = axes[0] if has_val else axes
        ax.plot(epochs, [h.train_loss for h in history], marker="o", label="total")
        ax.plot(epochs, [h.main_loss for h in history], marker="s", label="main")
        if any(not math.isnan(h.aux_loss) for h in history):
            ax.plot(epochs, [h.aux_loss for h in history], marker="^", label="aux")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend()
        if has_val:
            axes[1].plot(epochs, [h.val_acc for h in history], marker="o", color="tab:green")
            axes[1].set_xlabel("epoch")
            axes[1].set_ylabel("validation accuracy")
            axes[1].set_ylim(0.0, 1.0)
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
    return out_png


def render_lambda_figure(summary_csv, out_png):
    """Accuracy against the loss-mixing weight from an ablation summary.csv."""
    with open(summary_csv, "rb") as fh:
        lines = fh.read().decode("utf-8").splitlines()
    if not lines or not lines[0].startswith("lambda,"):
        raise ValueError(f"{summary_csv}: expected a 'lambda,...' header")
    header = lines[0].split(",")
    rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
    lams = [r[0] for r in rows]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for col in range(1, len(header)):
            ax.plot(lams, [r[col] for r in rows], marker="o", label=header[col])
        ax.set_xlabel("lambda")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0.0, 1.0)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
    return out_png


def render_entropy_figure(patches_csv, out_png):
    """Histogram of per-patch score entropies, with the uniform bound marked."""
    records = analyze.read_patches_csv(patches_csv)
    entropies = np.array([r.entropy for r in records])
    classes = records[0].scores.size
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.hist(entropies, bins=40, color="tab:blue", alpha=0.8)
        ax.axvline(math.log(classes), color="tab:red", linestyle="--",
                   label=f"uniform over {classes} classes")
        ax.set_xlabel("patch score entropy (nats)")
        ax.set_ylabel("patches")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
    return out_png
