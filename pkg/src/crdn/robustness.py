"""Noise/INU robustness sweep over a clean held-out set."""

from __future__ import annotations

from typing import Sequence

from .data import Dataset
from .errors import ConfigError
from .model import CRDN
from .train import evaluate

DEFAULT_NOISE = (0, 1, 3, 5, 7, 9)
DEFAULT_INU = (0, 20, 40)


def find_anomalies(cells: Sequence[dict], metric: str = "mean_dice", tol: float = 1e-3) -> list[dict]:
    """Grid neighbours where the metric improves by more than ``tol`` as corruption grows.

    Scores are expected to be non-increasing along both axes; each violation is
    reported rather than raised.
    """
    by_key = {(c["noise"], c["inu"]): c[metric] for c in cells}
    noise = sorted({c["noise"] for c in cells})
    inu = sorted({c["inu"] for c in cells})
    found = []
    for axis, levels, other in (("noise", noise, inu), ("inu", inu, noise)):
        for fixed in other:
            for lo, hi in zip(levels, levels[1:]):
                a = (lo, fixed) if axis == "noise" else (fixed, lo)
                b = (hi, fixed) if axis == "noise" else (fixed, hi)
                if a in by_key and b in by_key and by_key[b] > by_key[a] + tol:
                    found.append({"axis": axis, "from": dict(zip(("noise", "inu"), a)),
                                  "to": dict(zip(("noise", "inu"), b)), "increase": by_key[b] - by_key[a]})
    return found


def robustness_sweep(model: CRDN, clean: Dataset, noise_levels: Sequence[float] = DEFAULT_NOISE,
                     inu_levels: Sequence[float] = DEFAULT_INU, batch_size: int = 16) -> dict:
    """Evaluate ``model`` on every (noise, INU) corruption of ``clean``.

    Corruptions are seeded per sample, so every model sees identical inputs.
    """
    dirty = [m for m in clean.meta if m.get("noise", 0) or m.get("inu", 0)]
    if dirty:
        raise ConfigError(f"robustness sweep needs a clean dataset; {len(dirty)} samples are already corrupted")
    if not noise_levels or not inu_levels:
        raise ConfigError("noise and INU level lists must be non-empty")
    cells = []
    for inu in inu_levels:
        for noise in noise_levels:
            ds = clean if noise == 0 and inu == 0 else clean.corrupted(noise=noise, inu=inu)
            rep = evaluate(model, ds, batch_size)
            cells.append({"noise": noise, "inu": inu, "mean_dice": rep["mean_dice"],
                          "pixel_acc": rep["pixel_acc"], "per_class_dice": rep["per_class_dice"]})
    lookup = {(c["noise"], c["inu"]): c for c in cells}
    clean_cell = lookup.get((0, 0))
    harsh_key = (max(noise_levels), max(inu_levels))
    harsh = lookup[harsh_key]
    return {
        "noise_levels": list(noise_levels),
        "inu_levels": list(inu_levels),
        "samples": len(clean),
        "cells": cells,
        "clean_mean_dice": None if clean_cell is None else clean_cell["mean_dice"],
        "harshest": {"noise": harsh_key[0], "inu": harsh_key[1], "mean_dice": harsh["mean_dice"]},
        "harshest_drop": None if clean_cell is None else clean_cell["mean_dice"] - harsh["mean_dice"],
        "anomalies": find_anomalies(cells),
    }
