"""Figures for the eval and train reports: qualitative mask grids and loss curves."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def parse_log(text: str) -> List[dict]:
    """Rows of a training log (``key=value`` pairs, one epoch per line)."""
    rows = []
    for line in text.splitlines():
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        if "epoch" in fields:
            rows.append({k: int(v) if k == "epoch" else float(v) for k, v in fields.items()})
    return rows


def plot_training_curve(log_text: str, path) -> Path:
    rows = parse_log(log_text)
    if not rows:
        raise ValueError("training log has no epoch lines")
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        ax_loss.plot(epochs, [r["train_loss"] for r in rows], label="train")
        ax_loss.plot(epochs, [r["val_loss"] for r in rows], label="val")
        best = min(rows, key=lambda r: r["val_loss"])
        ax_loss.axvline(best["epoch"], color="0.6", lw=0.8, ls="--")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        ax_metric.plot(epochs, [r["val_f1"] for r in rows], label="val F1")
        ax_metric.plot(epochs, [r["val_miou"] for r in rows], label="val mIoU")
        ax_metric.set_xlabel("epoch")
        ax_metric.set_ylim(0, 1)
        ax_metric.legend(frameon=False)
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path


def plot_mask_grid(
    goals: Sequence[np.ndarray],
    currents: Sequence[np.ndarray],
    truths: Sequence[np.ndarray],
    preds: Sequence[np.ndarray],
    path,
    max_rows: int = 6,
) -> Path:
    """One row per sample: goal, current, ground truth, prediction."""
    n = min(len(goals), max_rows)
    if n == 0:
        raise ValueError("no samples to plot")
    titles = ("goal", "current", "ground truth", "prediction")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n, 4, figsize=(6.4, 1.6 * n), squeeze=False)
        for r in range(n):
            panels = (goals[r], currents[r], truths[r], preds[r])
            for c, img in enumerate(panels):
                ax = axes[r, c]
                if img.ndim == 2:
                    ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                else:
                    ax.imshow(img, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(titles[c])
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return path
