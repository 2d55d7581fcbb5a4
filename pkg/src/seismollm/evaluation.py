"""Batched inference, per-task scoring and report files."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ConfigError, ScalingRanges, decode_azimuth_array, unscale_output
from .geo import locate_epicenter, location_error_km
from .metrics import (
    PickMatchCounts,
    azimuth_residual,
    classification_metrics,
    extract_picks,
    match_picks,
    regression_metrics,
)
from .train import Sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.3
    min_separation: float = 1.0
    tolerance: float = 0.1
    batch_size: int = 64
    hist_bins: int = 40


@dataclass
class EvalReport:
    task: str
    n: int
    metrics: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    residuals: dict[str, np.ndarray] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    setting: str = "standard"

    def add(self, name: str, value: float, count: int):
        self.metrics[name] = float(value)
        self.counts[name] = int(count)


@torch.no_grad()
def predict(model, samples: Sequence[Sample], batch_size: int = 64, device: str = "cpu") -> np.ndarray:
    model.eval()
    model.to(device)
    outs = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        x = torch.as_tensor(np.stack([np.asarray(r.trace, dtype=np.float32) for r, _ in batch]))
        outs.append(model(x.to(device)).double().cpu().numpy())
    return np.concatenate(outs)


def _require(samples: Sequence[Sample], attr: str, task: str):
    missing = [r.trace_id for r, _ in samples if getattr(r, attr) is None]
    if missing:
        raise ConfigError(f"{task} evaluation needs {attr}; missing for {missing[:3]}")


def _add_regression(report: EvalReport, prefix: str, preds, truths):
    m = regression_metrics(preds, truths)
    for key in ("MAE", "R2", "Mean", "Std", "MAPE", "RMSE"):
        report.add(prefix + key, getattr(m, key.lower()), m.n)
    if m.mape_skipped:
        report.notes.append(f"{prefix}MAPE skipped {m.mape_skipped} near-zero truths")
    return m


def score_predictions(task: str, preds: np.ndarray, samples: Sequence[Sample], cfg: EvalConfig = EvalConfig(),
                      scaling: ScalingRanges = ScalingRanges()) -> EvalReport:
    """Turn raw model outputs (as returned by :func:`predict`) into an :class:`EvalReport`."""
    if len(preds) != len(samples):
        raise ValueError(f"{len(preds)} predictions for {len(samples)} samples")
    report = EvalReport(task, len(samples))
    records = [r for r, _ in samples]

    if task == "picking":
        for ch, phase, attr in ((0, "P", "p_index"), (1, "S", "s_index")):
            counts = PickMatchCounts()
            for rec, out in zip(records, preds):
                sr = rec.sample_rate
                picks = extract_picks(out[ch], cfg.threshold, cfg.min_separation, sr)
                truth = [] if getattr(rec, attr) is None else [getattr(rec, attr)]
                counts = counts + match_picks(picks, truth, cfg.tolerance, sr)
            cm = classification_metrics(counts)
            n_truth = counts.tp + counts.fn
            report.add(f"{phase}.Pr", cm.precision, counts.tp + counts.fp)
            report.add(f"{phase}.Re", cm.recall, n_truth)
            report.add(f"{phase}.F1", cm.f1, n_truth)
            res_s = np.asarray(counts.residuals, dtype=np.float64)
            report.residuals[f"{phase}_seconds"] = res_s
            if res_s.size:
                sr = records[0].sample_rate
                pts = res_s * sr
                m = regression_metrics(pts, np.zeros_like(pts))
                report.add(f"{phase}.MAE", m.mae, m.n)
                report.add(f"{phase}.Mean", m.mean, m.n)
                report.add(f"{phase}.Std", m.std, m.n)
                report.add(f"{phase}.RMSE", m.rmse, m.n)
            if cm.degenerate:
                report.notes.append(f"{phase}: zero denominator in precision/recall")
        report.notes.append("pick MAE/Mean/Std/RMSE are in data points; residual arrays are in seconds")
        return report

    if task == "polarity":
        _require(samples, "polarity", task)
        truth = np.array([0 if r.polarity == "up" else 1 for r in records])
        guess = np.argmax(preds, axis=-1)
        prs, res, f1s = [], [], []
        for cls in (0, 1):
            tp = int(np.sum((guess == cls) & (truth == cls)))
            fp = int(np.sum((guess == cls) & (truth != cls)))
            fn = int(np.sum((guess != cls) & (truth == cls)))
            cm = classification_metrics((tp, fp, fn))
            prs.append(cm.precision)
            res.append(cm.recall)
            f1s.append(cm.f1)
        n = len(records)
        report.add("Pr", float(np.mean(prs)), n)
        report.add("Re", float(np.mean(res)), n)
        report.add("F1", float(np.mean(f1s)), n)
        report.add("Acc", float(np.mean(guess == truth)), n)
        report.notes.append("polarity Pr/Re/F1 are macro averages over up/down")
        return report

    if task == "azimuth":
        _require(samples, "back_azimuth_deg", task)
        truth = np.array([r.back_azimuth_deg for r in records])
        pred_deg = decode_azimuth_array(preds[:, 0], preds[:, 1])
        res = azimuth_residual(pred_deg, truth)
        res = np.atleast_1d(res)
        # metrics on the wrapped residual: prediction taken as truth + circular error
        _add_regression(report, "", truth + res, truth)
        report.residuals["azimuth_deg"] = res
        report.notes.append("azimuth errors use circular residuals wrapped to (-180, 180]")
        return report

    if task in ("distance", "magnitude"):
        attr = "distance_km" if task == "distance" else "magnitude"
        _require(samples, attr, task)
        lo, hi = scaling.distance_km if task == "distance" else scaling.magnitude
        truth = np.array([getattr(r, attr) for r in records], dtype=np.float64)
        values = np.atleast_1d(unscale_output(np.clip(preds.reshape(-1), 0.0, 1.0), lo, hi))
        _add_regression(report, "", values, truth)
        report.residuals["distance_km" if task == "distance" else "magnitude"] = values - truth
        return report

    raise ConfigError(f"unknown task {task!r}")


def evaluate(model, samples: Sequence[Sample], task: str, cfg: EvalConfig = EvalConfig(),
             scaling: ScalingRanges = ScalingRanges(), device: str = "cpu") -> EvalReport:
    if getattr(model, "task", task) != task:
        raise ConfigError(f"model predicts {model.task!r}, asked to evaluate {task!r}")
    if not samples:
        raise ConfigError("cannot evaluate an empty split")
    return score_predictions(task, predict(model, samples, cfg.batch_size, device), samples, cfg, scaling)


def location_report(samples: Sequence[Sample], distance_km: np.ndarray, back_azimuth_deg: np.ndarray) -> EvalReport:
    """Single-station epicenter errors from predicted distance + back-azimuth.

    MAPE here is the mean of location error / true epicentral distance, as a fraction.
    """
    records = [r for r, _ in samples]
    for attr in ("station_lat_deg", "station_lon_deg", "event_lat_deg", "event_lon_deg", "distance_km"):
        _require(samples, attr, "location")
    errors, ratios = [], []
    for rec, d, baz in zip(records, distance_km, back_azimuth_deg):
        est = locate_epicenter(rec.station_lat_deg, rec.station_lon_deg, float(baz) % 360.0, max(float(d), 0.0))
        err = location_error_km(est, (rec.event_lat_deg, rec.event_lon_deg))
        errors.append(err)
        if rec.distance_km > 0:
            ratios.append(err / rec.distance_km)
    errors = np.asarray(errors)
    report = EvalReport("location", len(records))
    n = len(errors)
    report.add("MAE", float(np.mean(errors)), n)
    report.add("MAPE", float(np.mean(ratios)) if ratios else math.nan, len(ratios))
    report.add("RMSE", float(np.sqrt(np.mean(errors**2))), n)
    report.add("Std", float(np.std(errors)), n)
    report.residuals["location_km"] = errors
    report.notes.append("location MAPE is a fraction (error / epicentral distance), not a percentage")
    return report


def evaluate_location(distance_model, azimuth_model, samples: Sequence[Sample], cfg: EvalConfig = EvalConfig(),
                      scaling: ScalingRanges = ScalingRanges()) -> EvalReport:
    d_unit = predict(distance_model, samples, cfg.batch_size).reshape(-1)
    dist = np.atleast_1d(unscale_output(np.clip(d_unit, 0.0, 1.0), *scaling.distance_km))
    az = predict(azimuth_model, samples, cfg.batch_size)
    baz = decode_azimuth_array(az[:, 0], az[:, 1])
    return location_report(samples, dist, baz)


# --------------------------------------------------------------------------
# report files

METRICS_FILE = "metrics.tsv"


def emit_report(report: EvalReport, out_dir: str | os.PathLike, bins: int = 40) -> dict[str, Path]:
    """Write metrics.tsv, report.txt, residual dumps and histograms; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    path = out / METRICS_FILE
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t")
        w.writerow(["task", "metric", "value", "count"])
        w.writerow([report.task, "n", repr(float(report.n)), report.n])
        for name, value in report.metrics.items():
            w.writerow([report.task, name, repr(float(value)), report.counts.get(name, report.n)])
    written["metrics"] = path

    lines = [f"task: {report.task}  setting: {report.setting}  samples: {report.n}", ""]
    width = max([len(k) for k in report.metrics] + [6])
    lines.append(f"{'metric':<{width}}  {'value':>14}  {'count':>7}")
    for name, value in report.metrics.items():
        lines.append(f"{name:<{width}}  {value:>14.6g}  {report.counts.get(name, report.n):>7d}")
    for note in report.notes:
        lines.append(f"note: {note}")

    for name, res in report.residuals.items():
        res = np.asarray(res, dtype=np.float64)
        dump = out / f"residuals_{name}.csv"
        np.savetxt(dump, res, header=name, comments="", fmt="%.17g")
        written[f"residuals_{name}"] = dump
        if res.size == 0:
            lines.append(f"note: no residuals for {name}; histogram skipped")
            continue
        counts, edges = np.histogram(res, bins=bins)
        hist_csv = out / f"hist_{name}.csv"
        np.savetxt(hist_csv, np.column_stack([edges[:-1], edges[1:], counts]), delimiter=",",
                   header="bin_left,bin_right,count", comments="", fmt=["%.10g", "%.10g", "%d"])
        written[f"hist_{name}"] = hist_csv
        written[f"plot_{name}"] = _plot_histogram(res, edges, name, out / f"hist_{name}.png")

    table = out / "report.txt"
    table.write_text("\n".join(lines) + "\n")
    written["table"] = table
    return written


def _plot_histogram(res: np.ndarray, edges: np.ndarray, name: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(res, bins=edges, color="tab:blue", alpha=0.8)
    ax.set_xlabel(f"residual ({name})")
    ax.set_ylabel("count")
    ax.set_title(f"mean {res.mean():.3g}  std {res.std():.3g}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def read_metrics(path: str | os.PathLike) -> tuple[str, dict[str, float], dict[str, int]]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    task, values, counts = "", {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            task = row["task"]
            if row["metric"] == "n":
                continue
            values[row["metric"]] = float(row["value"])
            counts[row["metric"]] = int(row["count"])
    return task, values, counts


def load_report(out_dir: str | os.PathLike) -> EvalReport:
    """Rebuild a report from the files written by :func:`emit_report`."""
    out = Path(out_dir)
    task, values, counts = read_metrics(out / METRICS_FILE)
    n = 0
    with open(out / METRICS_FILE, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            if row["metric"] == "n":
                n = int(row["count"])
    report = EvalReport(task, n, values, counts)
    for dump in sorted(out.glob("residuals_*.csv")):
        name = dump.stem[len("residuals_"):]
        report.residuals[name] = np.atleast_1d(np.loadtxt(dump, skiprows=1, ndmin=1))
    return report
