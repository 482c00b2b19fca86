"""Figures rendered next to the JSON/CSV reports.

Everything draws onto the non-interactive Agg canvas and writes a PNG.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402
from .formats import PALETTE  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}

# tissue colours follow the label palette; white CSF is drawn grey so it shows on a white background
TISSUE_COLORS = {1: "#8c8c8c", 2: tuple(PALETTE[2] / 255), 3: "#d4a800"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def training_curves(records: Sequence[dict], path, title: str = "") -> Path:
    """Loss, mean Dice and pixel accuracy per epoch from a metric log."""
    epochs = [r["epoch"] for r in records]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_score) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        ax_loss.plot(epochs, [r["loss"] for r in records], color="#2b6cb0", marker="o", markersize=2.5)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("mean training loss")
        losses = [r["loss"] for r in records]
        if min(losses) > 0 and max(losses) / min(losses) > 10:
            ax_loss.set_yscale("log")

        ax_score.plot(epochs, [r["mean_dice"] for r in records], label="mean Dice", color="#2f855a")
        ax_score.plot(epochs, [r["pixel_acc"] for r in records], label="pixel accuracy", color="#9b2c2c", ls="--")
        per_class = np.array([r["per_class_dice"] for r in records])
        for k in range(1, per_class.shape[1]):
            ax_score.plot(epochs, per_class[:, k], color=TISSUE_COLORS.get(k, "#555555"), lw=0.8, alpha=0.8,
                          label=f"Dice {CLASS_NAMES[k] if k < len(CLASS_NAMES) else k}")
        ax_score.set_xlabel("epoch")
        ax_score.set_ylabel("held-out score")
        ax_score.set_ylim(max(0.0, min(0.5, float(per_class[:, 1:].min()) - 0.02)), 1.005)
        ax_score.legend(loc="upper center", bbox_to_anchor=(0.5, -0.3), ncol=3)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def robustness_sweep(cells: Sequence[dict], path, metric: str = "mean_dice") -> Path:
    """Heatmap over the (noise, INU) grid plus one Dice-vs-noise line per INU level."""
    noise = sorted({c["noise"] for c in cells})
    inu = sorted({c["inu"] for c in cells})
    grid = np.full((len(inu), len(noise)), np.nan)
    for c in cells:
        grid[inu.index(c["inu"]), noise.index(c["noise"])] = c[metric]
    with plt.rc_context(STYLE):
        fig, (ax_map, ax_line) = plt.subplots(1, 2, figsize=(8.5, 3.0), gridspec_kw={"width_ratios": [1.2, 1]})
        im = ax_map.imshow(grid, cmap="viridis", aspect="auto", origin="lower")
        ax_map.set_xticks(range(len(noise)), [f"{n:g}" for n in noise])
        ax_map.set_yticks(range(len(inu)), [f"{v:g}" for v in inu])
        ax_map.set_xlabel("noise level (%)")
        ax_map.set_ylabel("INU level (%)")
        for i in range(len(inu)):
            for j in range(len(noise)):
                ax_map.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center", fontsize=7,
                            color="white" if grid[i, j] < np.nanmean(grid) else "black")
        fig.colorbar(im, ax=ax_map, label=metric.replace("_", " "))

        for i, level in enumerate(inu):
            ax_line.plot(noise, grid[i], marker="o", markersize=3, label=f"INU {level:g}%")
        ax_line.set_xlabel("noise level (%)")
        ax_line.set_ylabel(metric.replace("_", " "))
        ax_line.legend()
        fig.tight_layout()
        return _save(fig, path)


def dice_boxplot(rows: Sequence[dict], path) -> Path:
    """Per-sample Dice distribution for each tissue class."""
    classes = sorted({r["class"] for r in rows})
    data = [[r["dice"] for r in rows if r["class"] == k] for k in classes]
    names = [CLASS_NAMES[k] if k < len(CLASS_NAMES) else str(k) for k in classes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        box = ax.boxplot(data, patch_artist=True, widths=0.55, medianprops={"color": "black"})
        ax.set_xticks(range(1, len(names) + 1), names)
        for patch, k in zip(box["boxes"], classes):
            patch.set_facecolor(TISSUE_COLORS.get(k, "#cccccc"))
            patch.set_alpha(0.75)
        ax.set_ylabel("Dice per sample")
        fig.tight_layout()
        return _save(fig, path)


def segmentation_overlay(image: np.ndarray, prediction: np.ndarray, path, labels: np.ndarray = None) -> Path:
    """First modality next to the colour-coded prediction (and ground truth when given)."""
    panels = [("input (modality 1)", image[0], "gray"), ("prediction", PALETTE[prediction], None)]
    if labels is not None:
        panels.append(("ground truth", PALETTE[labels], None))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8))
        for ax, (title, arr, cmap) in zip(axes, panels):
            ax.imshow(arr, cmap=cmap, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        fig.tight_layout()
        return _save(fig, path)
