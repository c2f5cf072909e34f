"""Figure rendering for the report paths (loss curves, confusion matrices,
score histograms). All functions write PNG files and return the path."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curve(history, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(history)), history, marker="o", markersize=3, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per sample")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_matrix(cm, path, title="classification"):
    counts = [[cm.tp, cm.fn], [cm.fp, cm.tn]]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks([0, 1], labels=["pred normal", "pred anomaly"])
    ax.set_yticks([0, 1], labels=["normal", "anomaly"])
    ax.set_ylabel("true class")
    ax.set_title(title)
    vmax = max(max(row) for row in counts) or 1
    for i in range(2):
        for j in range(2):
            color = "white" if counts[i][j] > 0.6 * vmax else "black"
            ax.text(j, i, str(counts[i][j]), ha="center", va="center", color=color)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_score_histogram(scores, path, title="per-sentence scores"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(scores, bins=20, range=(0.0, 1.0), edgecolor="black", alpha=0.75)
    ax.set_xlabel("score")
    ax.set_ylabel("sentences")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
