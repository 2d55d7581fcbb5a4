"""Pick extraction/matching and classification/regression metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model.embedder import ShapeError


@dataclass
class PickMatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    residuals: list[float] = field(default_factory=list)  # seconds, prediction - truth

    def __add__(self, other: "PickMatchCounts") -> "PickMatchCounts":
        return PickMatchCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                               self.residuals + other.residuals)


class ClassificationMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


class RegressionMetrics(NamedTuple):
    mae: float
    r2: float
    mean: float
    std: float
    mape: float
    rmse: float
    n: int
    mape_skipped: int = 0


def extract_picks(prob_seq, threshold: float = 0.3, min_separation: float = 1.0, sample_rate: float = 100.0) -> list[int]:
    """Local maxima above ``threshold``, kept greedily by height with an exclusion radius."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(prob_seq, dtype=np.float64)
    if p.size == 0:
        return []
    left = np.concatenate(([-np.inf], p[:-1]))
    right = np.concatenate((p[1:], [-np.inf]))
    candidates = np.flatnonzero((p > threshold) & (p >= left) & (p >= right))
    if candidates.size == 0:
        return []
    radius = min_separation * sample_rate
    # tallest first, earlier index wins ties
    order = sorted(candidates.tolist(), key=lambda i: (-p[i], i))
    kept: list[int] = []
    for i in order:
        if all(abs(i - k) >= radius for k in kept):
            kept.append(i)
    return sorted(kept)


def match_picks(pred: Sequence[int], truth: Sequence[int], tolerance: float = 0.1, sample_rate: float = 100.0) -> PickMatchCounts:
    """Greedy nearest-first one-to-one matching within ``tolerance`` seconds."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    pairs = []
    for i, a in enumerate(pred):
        for j, b in enumerate(truth):
            dt = abs(a - b) / sample_rate
            if dt < tolerance:
                pairs.append((dt, a, b, i, j))
    # sorting on values (not list positions) keeps the result independent of input order
    pairs.sort(key=lambda t: (t[0], t[1], t[2]))
    used_p, used_t = set(), set()
    residuals = []
    for dt, a, b, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        residuals.append((a - b) / sample_rate)
    tp = len(residuals)
    return PickMatchCounts(tp, len(pred) - tp, len(truth) - tp, residuals)


def classification_metrics(counts: PickMatchCounts | tuple[int, int, int]) -> ClassificationMetrics:
    if isinstance(counts, PickMatchCounts):
        tp, fp, fn = counts.tp, counts.fp, counts.fn
    else:
        tp, fp, fn = counts
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return ClassificationMetrics(precision, recall, f1, degenerate)


def regression_metrics(preds, truths) -> RegressionMetrics:
    """MAE, R^2, mean/std of signed error (pred - truth), MAPE in percent, RMSE.

    Std uses the population normalizer so that RMSE^2 = Mean^2 + Std^2.
    MAPE skips truths with |y| < 1e-9 and reports how many were skipped.
    """
    yhat = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(truths, dtype=np.float64).ravel()
    if yhat.shape != y.shape:
        raise ShapeError(f"{yhat.size} predictions vs {y.size} truths")
    if y.size == 0:
        raise ValueError("regression metrics need at least one sample")
    err = yhat - y
    mae = float(np.mean(np.abs(err)))
    mean = float(np.mean(err))
    std = float(np.sqrt(np.mean((err - mean) ** 2)))
    rmse = float(np.sqrt(np.mean(err**2)))
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else math.nan
    ok = np.abs(y) >= 1e-9
    mape = float(np.mean(np.abs(err[ok] / y[ok])) * 100.0) if ok.any() else math.nan
    return RegressionMetrics(mae, r2, mean, std, mape, rmse, int(y.size), int((~ok).sum()))


def azimuth_residual(pred_deg, true_deg):
    """Signed circular difference in (-180, 180]."""
    d = (np.asarray(pred_deg, dtype=np.float64) - np.asarray(true_deg, dtype=np.float64) + 180.0) % 360.0 - 180.0
    d = np.where(d <= -180.0, 180.0, d)
    return float(d) if d.ndim == 0 else d
