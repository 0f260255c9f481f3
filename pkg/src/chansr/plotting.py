"""Static PNG figures for training histories, evaluation reports and ablations.

Rendering goes through the Agg backend with fixed size, dpi and no
timestamp metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .characteristics import REGRESSION_TARGETS, UNITS  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "chansr",
}
_PNG_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_history(history, path: str | Path) -> Path:
    """Training loss (log scale) and, when validated, PL validation MAE per epoch."""
    epochs = [r.epoch for r in history.records]
    val = [r.val_mae["PL"] for r in history.records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, 2, figsize=(8, 3), layout="constrained")
        ax[0].semilogy(epochs, history.losses, marker="o", ms=3)
        ax[0].set(xlabel="epoch", ylabel="composite loss", title="training loss")
        if any(math.isfinite(v) for v in val):
            ax[1].plot(epochs, val, marker="o", ms=3, color="C1")
        else:
            ax[1].text(0.5, 0.5, "no validation", ha="center", va="center", transform=ax[1].transAxes)
        ax[1].set(xlabel="epoch", ylabel="PL MAE (dB)", title="validation")
        return _save(fig, path)


def plot_reports(reports: dict[str, "object"], path: str | Path) -> Path:
    """Grouped per-target MAE bars, one group member per labelled report."""
    labels = list(reports)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(REGRESSION_TARGETS) + 1, figsize=(12, 3), layout="constrained")
        x = np.arange(len(labels))
        for ax, t in zip(axes, REGRESSION_TARGETS):
            ax.bar(x, [reports[k].mae(t) for k in labels], color=[f"C{i}" for i in range(len(labels))])
            ax.set_title(f"{t} MAE ({UNITS[t]})")
            ax.set_xticks(x, labels, rotation=30, ha="right")
        acc = [reports[k].los_accuracy for k in labels]
        axes[-1].bar(x, acc, color=[f"C{i}" for i in range(len(labels))])
        axes[-1].set_ylim(min(acc) - 0.05, 1.0)
        axes[-1].set_title("LOS accuracy")
        axes[-1].set_xticks(x, labels, rotation=30, ha="right")
        return _save(fig, path)


def plot_ablation(table, path: str | Path) -> Path:
    """PL MAE per ablation row and scale."""
    scales = sorted(table.rows[0].mae)
    names = [r.preset for r in table.rows]
    width = 0.8 / len(scales)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3), layout="constrained")
        x = np.arange(len(names))
        for i, s in enumerate(scales):
            ax.bar(x + i * width, [r.mae[s] for r in table.rows], width, label=f"x{s}")
        ax.set_xticks(x + width * (len(scales) - 1) / 2, [n.upper() for n in names])
        ax.set(ylabel="PL MAE (dB)", title="ablation")
        ax.legend()
        return _save(fig, path)


def plot_maps(maps: dict[str, np.ndarray], path: str | Path) -> Path:
    """Side-by-side raster panels; NaN cells render blank."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(maps), figsize=(2.6 * len(maps), 2.6), layout="constrained",
                                 squeeze=False)
        for ax, (name, m) in zip(axes[0], maps.items()):
            im = ax.imshow(m, cmap="viridis", interpolation="nearest")
            ax.set_title(name)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)
