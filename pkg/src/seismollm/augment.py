"""Training-time waveform augmentation.

Every transform takes and returns a ``(WaveformRecord, SampleLabels)`` pair.
Transforms that move signal (``time_drift``) shift the pick labels with it,
``noise_generation`` turns the sample into a negative example, and the
amplitude-only transforms leave labels alone.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ConfigError, SampleLabels, WaveformRecord

TRANSFORMS = (
    "gaussian_noise",
    "time_drift",
    "gaps",
    "channel_dropout",
    "amplitude_scale",
    "pre_emphasis",
    "noise_generation",
)


@dataclass(frozen=True)
class AugmentationSpec:
    gaussian_noise: float = 0.4
    time_drift: float = 0.4
    gaps: float = 0.4
    channel_dropout: float = 0.4
    amplitude_scale: float = 0.4
    pre_emphasis: float = 0.97
    noise_generation: float = 0.05
    noise_ratio: tuple[float, float] = (0.01, 0.15)
    drift_seconds: float = 0.5
    gap_count: tuple[int, int] = (1, 3)
    gap_seconds: tuple[float, float] = (0.1, 0.5)
    scale_range: tuple[float, float] = (0.5, 2.0)
    pre_emphasis_alpha: float = 0.97
    # polarity lives on Z; channel_dropout must not remove it
    protect_z: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in TRANSFORMS:
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augmentation probability {name}={p} outside [0, 1]")

    def probability(self, kind: str) -> float:
        return getattr(self, kind)

    @classmethod
    def disabled(cls, **kw) -> "AugmentationSpec":
        return cls(**{name: 0.0 for name in TRANSFORMS}, **kw)


def _shift(arr: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros_like(arr)
    n = arr.shape[-1]
    if d >= 0:
        out[..., d:] = arr[..., : n - d]
    else:
        out[..., : n + d] = arr[..., -d:]
    return out


def _colored_noise(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.arange(spec.shape[-1], dtype=np.float64)
    freqs[0] = 1.0
    beta = rng.uniform(0.0, 1.0)
    spec = spec / freqs**(beta / 2.0)
    noise = np.fft.irfft(spec, n=shape[-1], axis=-1)
    noise -= noise.mean(axis=-1, keepdims=True)
    noise /= np.sqrt(np.mean(noise**2, axis=-1, keepdims=True)) + 1e-12
    return noise


def augment_trace(record: WaveformRecord, labels: SampleLabels, kind: str, params: dict | None, rng: np.random.Generator,
                  spec: AugmentationSpec | None = None) -> tuple[WaveformRecord, SampleLabels]:
    """Apply a single named transform.

    ``params`` pins the transform's random draws (e.g. ``{"shift": 200}`` or
    ``{"channel": 0}``); anything not pinned is drawn from ``rng`` within the
    ranges of ``spec``.
    """
    if kind not in TRANSFORMS:
        raise ConfigError(f"unknown augmentation {kind!r}")
    spec = spec or AugmentationSpec()
    params = params or {}
    x = np.asarray(record.trace)
    dtype = x.dtype
    sr = record.sample_rate
    n = x.shape[-1]

    if kind == "gaussian_noise":
        ratio = params.get("ratio", rng.uniform(*spec.noise_ratio))
        std = x.std(axis=-1, keepdims=True)
        y = x + ratio * std * rng.standard_normal(x.shape)
        return replace(record, trace=y.astype(dtype)), labels

    if kind == "time_drift":
        max_shift = int(round(spec.drift_seconds * sr))
        d = int(params["shift"]) if "shift" in params else int(rng.integers(-max_shift, max_shift + 1))
        for idx in (record.p_index, record.s_index):
            if idx is not None and not 0 <= idx + d < n:
                return record, labels
        new_record = replace(
            record,
            trace=_shift(x, d),
            p_index=None if record.p_index is None else record.p_index + d,
            s_index=None if record.s_index is None else record.s_index + d,
        )
        new_labels = replace(labels, pick_p=_shift(labels.pick_p, d), pick_s=_shift(labels.pick_s, d))
        return new_record, new_labels

    if kind == "gaps":
        y = x.copy()
        if "intervals" in params:
            intervals = params["intervals"]
        else:
            count = int(rng.integers(spec.gap_count[0], spec.gap_count[1] + 1))
            intervals = []
            for _ in range(count):
                width = max(1, int(round(rng.uniform(*spec.gap_seconds) * sr)))
                start = int(rng.integers(0, max(1, n - width)))
                intervals.append((start, start + width))
        for start, stop in intervals:
            y[:, start:stop] = 0
        return replace(record, trace=y), labels

    if kind == "channel_dropout":
        choices = (0, 1) if spec.protect_z else (0, 1, 2)
        ch = int(params["channel"]) if "channel" in params else int(rng.choice(choices))
        if spec.protect_z and ch == 2:
            raise ConfigError("channel_dropout may not zero Z when polarity is the task")
        y = x.copy()
        y[ch] = 0
        return replace(record, trace=y), labels

    if kind == "amplitude_scale":
        factor = params.get("factor", rng.uniform(*spec.scale_range))
        return replace(record, trace=(x * factor).astype(dtype)), labels

    if kind == "pre_emphasis":
        alpha = params.get("alpha", spec.pre_emphasis_alpha)
        y = x.copy()
        y[:, 1:] = x[:, 1:] - alpha * x[:, :-1]
        return replace(record, trace=y), labels

    # noise_generation
    rms = np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2, axis=-1, keepdims=True))
    rms = np.where(rms > 0, rms, 1.0)
    y = _colored_noise(x.shape, rng) * rms
    new_record = replace(record, trace=y.astype(dtype), p_index=None, s_index=None)
    new_labels = replace(
        labels,
        pick_p=np.zeros_like(labels.pick_p),
        pick_s=np.zeros_like(labels.pick_s),
        regression_valid=False,
    )
    return new_record, new_labels


def run_pipeline(record: WaveformRecord, labels: SampleLabels, spec: AugmentationSpec,
                 rng: np.random.Generator) -> tuple[WaveformRecord, SampleLabels, list[str]]:
    """Like :func:`apply_pipeline` but also reports which transforms fired."""
    # all gates are drawn up front so each fires at exactly its own rate
    gates = rng.random(len(TRANSFORMS)) < np.array([spec.probability(k) for k in TRANSFORMS])
    applied = []
    for kind, fire in zip(TRANSFORMS, gates):
        if not fire:
            continue
        new_record, labels = augment_trace(record, labels, kind, None, rng, spec)
        if new_record is record and kind == "time_drift":
            # drift would have pushed a pick off the trace
            continue
        record = new_record
        applied.append(kind)
        if kind == "noise_generation":
            break
    return record, labels, applied


def apply_pipeline(record: WaveformRecord, labels: SampleLabels, spec: AugmentationSpec,
                   rng: np.random.Generator) -> tuple[WaveformRecord, SampleLabels]:
    record, labels, _ = run_pipeline(record, labels, spec, rng)
    return record, labels
