"""Per-task training loop: Adam, triangular cyclic LR, early stopping."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .augment import AugmentationSpec, apply_pipeline
from .data import ConfigError, SampleLabels, WaveformRecord
from .losses import ce_loss, huber_loss, picking_loss
from .model.network import SeisMoLLM, frozen_checksums, save_model

log = logging.getLogger(__name__)

Sample = tuple[WaveformRecord, SampleLabels]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    lr_low: float = 5e-4
    lr_high: float = 1e-3
    cycle_epochs: float = 10.0
    patience: int = 30
    max_epochs: int = 200
    huber_delta: float = 1.0
    seed: int = 0
    augment: bool = True
    # stop as soon as the validation loss drops below this value
    stop_below: float | None = None
    check_frozen: bool = False
    log_path: str | None = None

    def __post_init__(self):
        if not self.lr_low < self.lr_high:
            raise ConfigError("lr_low must be below lr_high")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.cycle_epochs <= 0:
            raise ConfigError("cycle_epochs must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def record(self, train_loss: float, val_loss: float, lr: float, wall: float) -> bool:
        """Append one epoch; returns True when it is the new best."""
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.wall_time.append(wall)
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_epoch = len(self.val_loss)
            return True
        return False


def cyclic_lr(progress: float, cfg: TrainConfig = TrainConfig()) -> float:
    """Triangular wave: ``lr_low`` at progress 0, ``lr_high`` after ``cycle_epochs``, period ``2*cycle_epochs``."""
    half = cfg.cycle_epochs
    x = math.fmod(max(progress, 0.0), 2.0 * half)
    frac = x / half if x <= half else (2.0 * half - x) / half
    return cfg.lr_low + (cfg.lr_high - cfg.lr_low) * frac


def early_stop(history: TrainHistory | Sequence[float], patience: int) -> str:
    """'stop' once the last ``patience`` validation losses all fail to beat the best before them."""
    losses = list(history.val_loss if isinstance(history, TrainHistory) else history)
    if not losses:
        raise ValueError("early_stop needs at least one epoch")
    if len(losses) <= patience:
        return "continue"
    best_before = min(losses[:-patience])
    if all(v >= best_before for v in losses[-patience:]):
        return "stop"
    return "continue"


# --------------------------------------------------------------------------
# data


def task_target(labels: SampleLabels, task: str) -> np.ndarray:
    if task == "picking":
        return np.stack([labels.pick_p, labels.pick_s])
    value = {
        "azimuth": labels.azimuth_sincos,
        "distance": labels.distance_unit,
        "magnitude": labels.magnitude_unit,
        "polarity": labels.polarity_onehot,
    }.get(task, ...)
    if value is ...:
        raise ConfigError(f"unknown task {task!r}")
    if value is None:
        if not labels.regression_valid:
            return np.zeros(2 if task in ("azimuth", "polarity") else (), dtype=np.float32)
        raise ConfigError(f"sample has no {task} label")
    return np.asarray(value, dtype=np.float32)


class TaskDataset(Dataset):
    """(waveform, target, valid) triples for one task, optionally augmented."""

    def __init__(self, samples: Sequence[Sample], task: str, augment: AugmentationSpec | None = None, seed: int = 0):
        self.samples = list(samples)
        self.task = task
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        for record, labels in self.samples:
            task_target(labels, task)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        record, labels = self.samples[i]
        if self.augment is not None:
            rng = np.random.default_rng([self.seed, self.epoch, i])
            record, labels = apply_pipeline(record, labels, self.augment, rng)
        x = torch.as_tensor(np.asarray(record.trace, dtype=np.float32))
        y = torch.as_tensor(task_target(labels, self.task))
        return x, y, torch.tensor(float(labels.regression_valid))


def task_loss(task: str, pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    if task == "picking":
        return picking_loss(pred[:, 0], pred[:, 1], target[:, 0], target[:, 1])
    keep = valid > 0.5
    if not bool(keep.any()):
        return pred.sum() * 0.0
    pred, target = pred[keep], target[keep]
    if task == "polarity":
        return ce_loss(pred, target)
    return huber_loss(pred, target, delta)


@torch.no_grad()
def dataset_loss(model: SeisMoLLM, samples: Sequence[Sample], task: str, cfg: TrainConfig, batch_size: int | None = None,
                 device: str = "cpu") -> float:
    """Eval-mode loss over a sample set, no augmentation, weighted by batch size."""
    model.eval()
    loader = DataLoader(TaskDataset(samples, task), batch_size=batch_size or cfg.batch_size, shuffle=False)
    total, count = 0.0, 0
    for x, y, v in loader:
        x, y, v = x.to(device), y.to(device), v.to(device)
        loss = task_loss(task, model(x), y, v, cfg.huber_delta)
        total += float(loss) * len(x)
        count += len(x)
    return total / max(count, 1)


def fit(
    model: SeisMoLLM,
    train: Sequence[Sample],
    val: Sequence[Sample],
    task: str,
    cfg: TrainConfig = TrainConfig(),
    augment: AugmentationSpec | None = None,
    out_path: str | os.PathLike | None = None,
    callback: Callable[[SeisMoLLM, TrainHistory], bool] | None = None,
    config_record: dict | None = None,
    device: str = "cpu",
) -> tuple[SeisMoLLM, TrainHistory]:
    """Train ``model`` on one task and return it with the best-validation weights restored.

    ``callback(model, history)`` runs after every epoch; returning True stops
    training and keeps the current weights (as does ``cfg.stop_below``).
    """
    if model.task != task:
        raise ConfigError(f"model was built for {model.task!r}, not {task!r}")
    if not train or not val:
        raise ConfigError("train and validation splits must be non-empty")
    torch.manual_seed(cfg.seed)
    model.to(device)
    if augment is None and cfg.augment:
        augment = AugmentationSpec(protect_z=task == "polarity", seed=cfg.seed)
    if not cfg.augment:
        augment = None
    dataset = TaskDataset(train, task, augment, cfg.seed)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(cfg.seed))
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.lr_low)
    checksums = frozen_checksums(model) if cfg.check_frozen else None
    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    log_fh = open(cfg.log_path, "a") if cfg.log_path else None
    steps = len(loader)
    reached_target = False
    t0 = time.time()
    try:
        for epoch in range(cfg.max_epochs):
            model.train()
            dataset.set_epoch(epoch)
            running, seen = 0.0, 0
            lr = cfg.lr_low
            for step, (x, y, v) in enumerate(loader):
                x, y, v = x.to(device), y.to(device), v.to(device)
                lr = cyclic_lr(epoch + step / steps, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss = task_loss(task, model(x), y, v, cfg.huber_delta)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch + 1}, step {step}, lr {lr:.2e}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                running += loss.item() * len(x)
                seen += len(x)
            if checksums is not None and frozen_checksums(model) != checksums:
                raise RuntimeError(f"a frozen tensor changed during epoch {epoch + 1}")
            val_loss = dataset_loss(model, val, task, cfg, device=device)
            improved = history.record(running / seen, val_loss, lr, time.time() - t0)
            if improved:
                best_state = copy.deepcopy(model.state_dict())
                if out_path is not None:
                    save_model(model, out_path, config_record)
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch + 1, "train_loss": running / seen, "val_loss": val_loss,
                                         "lr": lr, "wall_time": history.wall_time[-1]}) + "\n")
                log_fh.flush()
            log.info("epoch %d train %.5f val %.5f lr %.2e", epoch + 1, running / seen, val_loss, lr)
            if cfg.stop_below is not None and val_loss < cfg.stop_below:
                reached_target = True
                break
            if callback is not None and callback(model, history):
                reached_target = True
                break
            if early_stop(history, cfg.patience) == "stop":
                log.info("early stop after epoch %d (best %d)", epoch + 1, history.best_epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    if not reached_target:
        model.load_state_dict(best_state)
    model.eval()
    return model, history
