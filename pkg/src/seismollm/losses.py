"""Training losses: binary cross-entropy, picking, cross-entropy and Huber."""
from __future__ import annotations

import torch

from .data import ConfigError
from .model.embedder import ShapeError

EPS = 1e-7


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: prediction shape {tuple(a.shape)} != label shape {tuple(b.shape)}")


def bce_loss(pred, label, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross-entropy over all elements, predictions clipped to [eps, 1 - eps]."""
    pred = _as_tensor(pred)
    label = _as_tensor(label, pred)
    _check_shapes(pred, label, "bce_loss")
    p = pred.clamp(eps, 1.0 - eps)
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p)).mean()


def picking_loss(pred_p, pred_s, label_p, label_s) -> torch.Tensor:
    pred_p, pred_s = _as_tensor(pred_p), _as_tensor(pred_s)
    label_p, label_s = _as_tensor(label_p, pred_p), _as_tensor(label_s, pred_s)
    if not (pred_p.shape == pred_s.shape == label_p.shape == label_s.shape):
        raise ShapeError("picking_loss: P/S predictions and labels must have equal lengths")
    return bce_loss(pred_p, label_p) + bce_loss(pred_s, label_s)


def ce_loss(pred, onehot, eps: float = EPS, atol: float = 1e-6) -> torch.Tensor:
    """Cross-entropy ``-sum(y log p)`` per sample, averaged over a leading batch axis if present."""
    pred = _as_tensor(pred)
    onehot = _as_tensor(onehot, pred)
    _check_shapes(pred, onehot, "ce_loss")
    sums = pred.detach().sum(dim=-1)
    if torch.any((sums - 1.0).abs() > atol):
        raise ValueError(f"ce_loss: predictions must sum to 1 (max deviation {float((sums - 1).abs().max()):.2e})")
    p = pred.clamp(eps, 1.0)
    per_sample = -(onehot * torch.log(p)).sum(dim=-1)
    return per_sample.mean()


def huber_loss(pred, truth, delta: float = 1.0) -> torch.Tensor:
    """Mean Huber loss: 0.5 r^2 for |r| <= delta, delta (|r| - 0.5 delta) beyond."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    pred = _as_tensor(pred)
    truth = _as_tensor(truth, pred)
    _check_shapes(pred, truth, "huber_loss")
    r = (pred - truth).abs()
    quad = 0.5 * r**2
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()
