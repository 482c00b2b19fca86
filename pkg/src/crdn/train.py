"""Adam with decoupled weight decay, the learning-rate schedule and the train/eval loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, TrainingDiverged
from .metrics import ConfusionCounts, macro_mean_dice, per_sample_dice
from .model import CRDN, predict, save_checkpoint
from . import ops
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 6e-4
    weight_decay: float = 1e-4
    lr_decay: float = 0.98
    batch_size: int = 8
    epochs: int = 40
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1
    eval_batch_size: int = 16

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def create(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam with decoupled decay ``theta -= lr * wd * theta``.

    Rebinds each ``param.data`` to a fresh array.
    """
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.name} {p.shape}")
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {p.name or '<unnamed>'}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = beta1 * state.m[i] + (1 - beta1) * g
        v = beta2 * state.v[i] + (1 - beta2) * (g * g)
        state.m[i], state.v[i] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - lr * update - lr * weight_decay * p.data).astype(p.dtype)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Exponential per-epoch decay ``lr0 * gamma ** epoch``."""
    return config.lr * config.lr_decay ** epoch


# ---------------------------------------------------------------- evaluation

def predict_dataset(model: CRDN, dataset: Dataset, batch_size: int = 16) -> np.ndarray:
    dtype = model.config.dtype
    out = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.images[start : start + batch_size].astype(dtype)
        out.append(predict(model.forward(batch, training=False)[-1]))
    return np.concatenate(out)


def evaluate(model: CRDN, dataset: Dataset, batch_size: int = 16, average: str = "micro",
             return_predictions: bool = False) -> dict:
    """Dice per class, mean foreground Dice and pixel accuracy in evaluation mode.

    ``average="micro"`` pools confusion counts over the whole dataset before
    taking ratios; ``"macro"`` averages per-image mean Dice.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if average not in ("micro", "macro"):
        raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
    classes = model.config.classes
    preds = predict_dataset(model, dataset, batch_size)
    counts = ConfusionCounts.empty(classes)
    for p, g in zip(preds, dataset.labels):
        counts = counts + ConfusionCounts.from_maps(p, g, classes)
    report = {
        "per_class_dice": counts.dice_per_class(),
        "mean_dice": counts.mean_dice() if average == "micro" else macro_mean_dice(preds, dataset.labels, classes),
        "pixel_acc": counts.pixel_accuracy(),
        "average": average,
        "samples": len(dataset),
    }
    if return_predictions:
        report["predictions"] = preds
    return report


def boxplot_rows(model: CRDN, dataset: Dataset, batch_size: int = 16) -> list[dict]:
    preds = predict_dataset(model, dataset, batch_size)
    ids = [m.get("index", i) for i, m in enumerate(dataset.meta)]
    return per_sample_dice(preds, dataset.labels, model.config.classes, ids)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: CRDN
    log: list = field(default_factory=list)
    checkpoint: Optional[str] = None


def train_step(model: CRDN, params: list, adam: AdamState, images: np.ndarray, labels: np.ndarray,
               lr: float, config: TrainConfig) -> float:
    with GradTape() as tape:
        scores = model.forward(images, training=True)
        loss = ops.softmax_cross_entropy(scores[-1], labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    grads = tape.gradient(loss, params)
    adam_step(params, grads, adam, lr, config.weight_decay, config.beta1, config.beta2, config.adam_eps)
    return value


def _log_line(record: dict) -> str:
    return json.dumps(record, separators=(", ", ": "))


def train(model: CRDN, dataset: Dataset, config: TrainConfig, eval_set: Optional[Dataset] = None,
          log_path=None, checkpoint_path=None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Mini-batch training with per-epoch evaluation and JSON-lines metric logging.

    Batches come from a permutation drawn from ``default_rng([seed, epoch])``.
    Metrics are computed on ``eval_set`` (the training set if omitted).  On a
    non-finite loss the previous checkpoint is left untouched and
    :class:`TrainingDiverged` is raised.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    eval_set = dataset if eval_set is None else eval_set
    dtype = model.config.dtype
    params = model.parameters()
    adam = AdamState.create(params)
    log_file = open(log_path, "w") if log_path else None
    result = TrainResult(model, checkpoint=str(checkpoint_path) if checkpoint_path else None)
    try:
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
            losses = []
            for start in range(0, len(order), config.batch_size):
                idx = np.sort(order[start : start + config.batch_size])
                try:
                    losses.append(train_step(model, params, adam, dataset.images[idx].astype(dtype),
                                             dataset.labels[idx], lr, config))
                except (TrainingDiverged, FloatingPointError) as exc:
                    where = f"epoch {epoch}, batch {start // config.batch_size}"
                    kept = f"; last good checkpoint: {checkpoint_path}" if checkpoint_path else ""
                    raise TrainingDiverged(f"{exc} at {where}{kept}") from None
            metrics = evaluate(model, eval_set, config.eval_batch_size)
            record = {
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.mean(losses)),
                "mean_dice": metrics["mean_dice"],
                "per_class_dice": metrics["per_class_dice"],
                "pixel_acc": metrics["pixel_acc"],
            }
            result.log.append(record)
            log.info("epoch %d lr %.3g loss %.4f dice %.4f pa %.4f", epoch, lr, record["loss"],
                     record["mean_dice"], record["pixel_acc"])
            if log_file:
                log_file.write(_log_line(record) + "\n")
                log_file.flush()
            last = epoch == config.epochs - 1
            if checkpoint_path and (last or (epoch + 1) % config.checkpoint_every == 0):
                save_checkpoint(model, checkpoint_path, epoch=epoch, metrics=record,
                                extra={"train_config": config.to_dict()})
            if on_epoch:
                on_epoch(record)
    finally:
        if log_file:
            log_file.close()
    return result


def fit_single(model: CRDN, image: np.ndarray, labels: np.ndarray, steps: int = 200,
               config: Optional[TrainConfig] = None) -> list[float]:
    """Repeated optimizer steps on one batch; returns the loss before each step."""
    config = config or TrainConfig()
    params = model.parameters()
    adam = AdamState.create(params)
    image = np.asarray(image, dtype=model.config.dtype)
    history = []
    for _ in range(steps):
        history.append(train_step(model, params, adam, image, labels, config.lr, config))
    return history
