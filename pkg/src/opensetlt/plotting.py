"""Static figures for run reports (written with the Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def per_class_bar(report, path):
    acc = np.asarray(report.per_class_acc, dtype=float)
    names = [str(c) for c in report.seen_classes]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names) + 2), 3))
    ax.bar(names, np.nan_to_num(acc), color="tab:blue")
    ax.set_ylim(0, 100)
    ax.set_xlabel("seen class")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"closed-set {report.closed_set_acc:.2f}%")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def confusion_heatmap(report, path):
    cm = np.asarray(report.confusion, dtype=float)
    rows = cm.sum(axis=1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    names = [str(c) for c in report.seen_classes] + ["out"]
    fig, ax = plt.subplots(figsize=(0.5 * len(names) + 2.5, 0.5 * len(names) + 2))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(names)), names)
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, int(cm[i, j]), ha="center", va="center", fontsize=7,
                    color="white" if norm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def training_curves(epochs, path):
    """Loss terms and validation accuracy per epoch from ``RunRecord.epochs``."""
    ep = [r["epoch"] for r in epochs]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3))
    for key in ("loss_total", "loss_sup", "loss_reg", "loss_mb", "loss_o", "loss_ui"):
        a1.plot(ep, [r[key] for r in epochs], label=key[5:])
    a1.set_xlabel("epoch")
    a1.set_ylabel("loss")
    a1.legend(fontsize=7)
    a2.plot(ep, [r["val_closed_acc"] for r in epochs], color="tab:green")
    a2.set_xlabel("epoch")
    a2.set_ylabel("val accuracy (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
