"""Dice coefficient and pixel accuracy over integer label maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN pixel counts plus overall totals; merges by addition."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    total: int = 0
    correct: int = 0

    @classmethod
    def empty(cls, classes: int) -> "ConfusionCounts":
        z = np.zeros(classes, dtype=np.int64)
        return cls(z.copy(), z.copy(), z.copy())

    @classmethod
    def from_maps(cls, pred, gt, classes: int) -> "ConfusionCounts":
        pred, gt = _check_pair(pred, gt)
        if pred.size and (max(pred.max(), gt.max()) >= classes or min(pred.min(), gt.min()) < 0):
            raise ValueError(f"labels must lie in [0, {classes})")
        p, g = pred.reshape(-1).astype(np.int64), gt.reshape(-1).astype(np.int64)
        matrix = np.bincount(g * classes + p, minlength=classes * classes).reshape(classes, classes)
        tp = np.diag(matrix).copy()
        return cls(tp, matrix.sum(axis=0) - tp, matrix.sum(axis=1) - tp, int(p.size), int(tp.sum()))

    @property
    def classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.total + other.total, self.correct + other.correct)

    def dice(self, k: int) -> float:
        denom = 2 * self.tp[k] + self.fp[k] + self.fn[k]
        return 1.0 if denom == 0 else float(2 * self.tp[k] / denom)

    def dice_per_class(self) -> list[float]:
        return [self.dice(k) for k in range(self.classes)]

    def mean_dice(self) -> float:
        """Mean over foreground classes ``1..C-1``."""
        return float(np.mean(self.dice_per_class()[1:]))

    def pixel_accuracy(self) -> float:
        return 0.0 if self.total == 0 else self.correct / self.total


def dice(pred, gt, k: int) -> float:
    """``2 TP / (2 TP + FP + FN)`` for class ``k``; 1.0 when ``k`` is absent from both maps."""
    pred, gt = _check_pair(pred, gt)
    p, g = pred == k, gt == k
    tp = np.count_nonzero(p & g)
    denom = np.count_nonzero(p) + np.count_nonzero(g)
    return 1.0 if denom == 0 else 2.0 * tp / denom


def mean_dice(pred, gt, classes: int) -> float:
    return float(np.mean([dice(pred, gt, k) for k in range(1, classes)]))


def pixel_accuracy(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    return float(np.count_nonzero(pred == gt) / pred.size)


def macro_mean_dice(preds: Sequence, gts: Sequence, classes: int) -> float:
    """Per-image mean Dice averaged over images."""
    return float(np.mean([mean_dice(p, g, classes) for p, g in zip(preds, gts)]))


def per_sample_dice(preds: Iterable, gts: Iterable, classes: int, ids: Iterable = None) -> list[dict]:
    rows = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        sid = i if ids is None else ids[i]
        for k in range(1, classes):
            rows.append({"sample_id": sid, "class": k, "dice": dice(p, g, k)})
    return rows


def write_boxplot_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sample_id", "class", "dice"])
        writer.writeheader()
        for r in rows:
            writer.writerow({"sample_id": r["sample_id"], "class": r["class"], "dice": repr(float(r["dice"]))})
