"""Figure rendering for the training and evaluation report paths.

Figures are written as PNG files next to the delimited outputs (the CSV
training log, the JSON metric report)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import METRIC_ORDER  # noqa: E402


def render_training_curves(log_path, out_path):
    """Loss and learning-rate curves from a training CSV log."""
    steps, loss, gen, clf, lr = [], [], [], [], []
    with open(log_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            loss.append(float(row["loss"]))
            gen.append(float(row["gen_loss"]))
            clf.append(float(row["clf_loss"]))
            lr.append(float(row["lr"]))
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, loss, label="total")
    ax1.plot(steps, gen, label="generation")
    ax1.plot(steps, clf, label="incoherence")
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(alpha=0.3)
    ax2.plot(steps, lr, color="tab:red")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("step")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_metric_bars(scores, out_path, label="storyend"):
    """Bar chart of the seven component scores (rSUM in the title)."""
    names = list(METRIC_ORDER)
    values = [scores[k] for k in names]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(names, values, color="tab:blue")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("score")
    ax.set_title(f"{label}  (rSUM = {scores['rSUM']:.2f})")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
