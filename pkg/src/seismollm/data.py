"""Waveform records, task labels, synthetic events and dataset stores.

A dataset store is a directory (or any location) described by a small JSON
manifest::

    {
      "format": "seismollm-manifest/1",
      "sample_rate": 50.0,
      "trace_length": 6000,          # raw length of every stored trace
      "pad_multiple": 64,            # traces are right-padded to this multiple
      "store": {"kind": "hdf5", "path": "traces.h5"},   # or {"kind": "npy", "path": "traces/"}
      "metadata": "metadata.csv"
    }

``metadata.csv`` has the columns in :data:`METADATA_COLUMNS`; a missing
label is an empty field.  HDF5 stores hold one ``float32`` dataset of shape
``[3, trace_length]`` per ``trace_id``; ``npy`` stores hold one
``<trace_id>.npy`` file per trace.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "seismollm-manifest/1"
METADATA_COLUMNS = (
    "trace_id",
    "p_index",
    "s_index",
    "magnitude",
    "distance_km",
    "back_azimuth_deg",
    "polarity",
    "station_lat",
    "station_lon",
    "event_lat",
    "event_lon",
)

# label half width and Gaussian sigma, seconds
PICK_HALF_WIDTH_S = 0.25
PICK_SIGMA_S = 0.1

# velocities of the synthetic generator only, km/s
VP_KM_S = 6.0
VS_KM_S = 3.5

DEFAULT_MAGNITUDE_RANGE = (-1.0, 8.0)
DEFAULT_DISTANCE_RANGE = (0.0, 300.0)


class DataFormatError(ValueError):
    """A stored trace or manifest does not match its declared layout."""


class ConfigError(ValueError):
    """Invalid configuration value."""


# how many values scale_target / unscale_output had to clip
clip_counter = {"scale_target": 0, "unscale_output": 0}


@dataclass(frozen=True)
class WaveformRecord:
    trace: np.ndarray  # [3, L], channels E, N, Z
    sample_rate: float
    trace_id: str = ""
    p_index: int | None = None
    s_index: int | None = None
    magnitude: float | None = None
    distance_km: float | None = None
    back_azimuth_deg: float | None = None
    polarity: str | None = None  # "up" | "down"
    station_lat_deg: float | None = None
    station_lon_deg: float | None = None
    event_lat_deg: float | None = None
    event_lon_deg: float | None = None
    pad_length: int = 0

    def __post_init__(self):
        if self.trace.ndim != 2 or self.trace.shape[0] != 3:
            raise DataFormatError(f"{self.trace_id!r}: trace must be [3, L], got {self.trace.shape}")
        n = self.trace.shape[1]
        if n <= 0:
            raise DataFormatError(f"{self.trace_id!r}: empty trace")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        for name in ("p_index", "s_index"):
            idx = getattr(self, name)
            if idx is not None and not 0 <= idx < n:
                raise IndexError(f"{self.trace_id!r}: {name}={idx} outside [0, {n})")
        if self.p_index is not None and self.s_index is not None and self.p_index >= self.s_index:
            raise DataFormatError(f"{self.trace_id!r}: p_index must precede s_index")
        if self.back_azimuth_deg is not None and not 0.0 <= self.back_azimuth_deg < 360.0:
            raise ValueError(f"{self.trace_id!r}: back azimuth {self.back_azimuth_deg} outside [0, 360)")
        if self.distance_km is not None and self.distance_km < 0:
            raise ValueError(f"{self.trace_id!r}: negative distance")
        if self.polarity not in (None, "up", "down"):
            raise ValueError(f"{self.trace_id!r}: polarity must be 'up' or 'down'")

    @property
    def length(self) -> int:
        return self.trace.shape[1]


@dataclass(frozen=True)
class SampleLabels:
    pick_p: np.ndarray
    pick_s: np.ndarray
    azimuth_sincos: tuple[float, float] | None = None
    magnitude_unit: float | None = None
    distance_unit: float | None = None
    polarity_onehot: tuple[float, float] | None = None
    # False for pure-noise samples produced by augmentation
    regression_valid: bool = True


@dataclass(frozen=True)
class ScalingRanges:
    magnitude: tuple[float, float] = DEFAULT_MAGNITUDE_RANGE
    distance_km: tuple[float, float] = DEFAULT_DISTANCE_RANGE


@dataclass(frozen=True)
class ManifestEntry:
    trace_id: str
    locator: str
    has_picks: bool
    has_magnitude: bool
    has_distance: bool
    has_azimuth: bool
    has_polarity: bool
    metadata: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    sample_rate: float
    trace_length: int
    pad_multiple: int = 64
    store_kind: str = "hdf5"
    store_path: str = ""
    root: str = ""
    tag: str = ""

    def __post_init__(self):
        ids = [e.trace_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataFormatError("duplicate trace_id in manifest")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def padded_length(self) -> int:
        return padded_length(self.trace_length, self.pad_multiple)

    @property
    def trace_ids(self) -> list[str]:
        return [e.trace_id for e in self.entries]

    def subset(self, entries: Iterable[ManifestEntry], tag: str = "") -> "DatasetManifest":
        return replace(self, entries=tuple(entries), tag=tag or self.tag)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    eval_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.eval_fraction)
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ConfigError(f"split fractions must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fr)!r}")


# --------------------------------------------------------------------------
# labels


def make_pick_label(length: int, pick_index: int, sample_rate: float) -> np.ndarray:
    """Truncated Gaussian pick probability, 1 at ``pick_index``.

    Sigma is 0.1 s and the support ends at +-0.25 s (total width 0.5 s);
    everything outside the window is exactly zero.
    """
    if sample_rate <= 0 or not math.isfinite(sample_rate):
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")
    if not 0 <= pick_index < length:
        raise IndexError(f"pick_index {pick_index} outside [0, {length})")
    label = np.zeros(length, dtype=np.float64)
    sigma = PICK_SIGMA_S * sample_rate
    half = PICK_HALF_WIDTH_S * sample_rate
    lo = max(0, int(math.ceil(pick_index - half)))
    hi = min(length - 1, int(math.floor(pick_index + half)))
    offsets = np.arange(lo, hi + 1) - pick_index
    window = np.exp(-0.5 * (offsets / sigma) ** 2)
    # the edge of the closed window is forced to zero so the label vanishes at +-0.25 s
    window[np.abs(offsets) >= half] = 0.0
    label[lo : hi + 1] = window
    return label


def encode_azimuth(theta_deg: float) -> tuple[float, float]:
    if not math.isfinite(theta_deg):
        raise ValueError(f"azimuth must be finite, got {theta_deg}")
    rad = math.radians(theta_deg % 360.0)
    return math.sin(rad), math.cos(rad)


def decode_azimuth(s: float, c: float) -> float:
    if s == 0 and c == 0:
        raise ValueError("cannot decode azimuth from (0, 0)")
    deg = math.degrees(math.atan2(s, c)) % 360.0
    # atan2 of a tiny negative sine can round to exactly 360
    return 0.0 if deg >= 360.0 else deg


def decode_azimuth_array(s: np.ndarray, c: np.ndarray) -> np.ndarray:
    deg = np.degrees(np.arctan2(s, c)) % 360.0
    return np.where(deg >= 360.0, 0.0, deg)


def scale_target(value: float, lo: float, hi: float) -> float:
    if not hi > lo:
        raise ConfigError(f"scaling range needs hi > lo, got ({lo}, {hi})")
    if value < lo or value > hi:
        clip_counter["scale_target"] += 1
        log.warning("target %s clipped into [%s, %s]", value, lo, hi)
        value = min(max(value, lo), hi)
    return (value - lo) / (hi - lo)


def unscale_output(u, lo: float, hi: float):
    """Map unit-interval outputs back to physical units (scalar or array)."""
    if not hi > lo:
        raise ConfigError(f"scaling range needs hi > lo, got ({lo}, {hi})")
    arr = np.asarray(u, dtype=np.float64)
    if np.any((arr < 0) | (arr > 1)):
        clip_counter["unscale_output"] += int(np.sum((arr < 0) | (arr > 1)))
        arr = np.clip(arr, 0.0, 1.0)
    out = lo + arr * (hi - lo)
    return float(out) if out.ndim == 0 else out


def make_labels(record: WaveformRecord, scaling: ScalingRanges = ScalingRanges()) -> SampleLabels:
    n = record.length
    sr = record.sample_rate
    pick_p = make_pick_label(n, record.p_index, sr) if record.p_index is not None else np.zeros(n)
    pick_s = make_pick_label(n, record.s_index, sr) if record.s_index is not None else np.zeros(n)
    az = encode_azimuth(record.back_azimuth_deg) if record.back_azimuth_deg is not None else None
    mag = scale_target(record.magnitude, *scaling.magnitude) if record.magnitude is not None else None
    dist = scale_target(record.distance_km, *scaling.distance_km) if record.distance_km is not None else None
    pol = None
    if record.polarity is not None:
        pol = (1.0, 0.0) if record.polarity == "up" else (0.0, 1.0)
    return SampleLabels(pick_p, pick_s, az, mag, dist, pol)


# --------------------------------------------------------------------------
# synthetic events


@dataclass(frozen=True)
class EventParams:
    magnitude: float
    distance_km: float
    back_azimuth_deg: float
    polarity: str = "up"
    noise_level: float = 0.01


def ricker(n: int, center: float, peak_freq: float, sample_rate: float) -> np.ndarray:
    t = (np.arange(n) - center) / sample_rate
    a = (math.pi * peak_freq * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def sp_interval_samples(distance_km: float, sample_rate: float) -> int:
    return int(round(distance_km * (1.0 / VS_KM_S - 1.0 / VP_KM_S) * sample_rate))


def synth_event(
    params: EventParams,
    seed: int,
    length: int,
    sample_rate: float,
    scaling: ScalingRanges = ScalingRanges(),
    trace_id: str | None = None,
    station: tuple[float, float] | None = None,
) -> tuple[WaveformRecord, SampleLabels]:
    """Deterministic single-station synthetic seismogram.

    P arrives in the first third of the trace; S follows after the S-P
    travel-time difference for Vp=6.0, Vs=3.5 km/s.  Both wavelets are
    Ricker pulses with peak amplitude ``10**(0.5*M) / distance``.
    """
    from .geo import locate_epicenter

    lo_m, hi_m = scaling.magnitude
    lo_d, hi_d = scaling.distance_km
    if not lo_m <= params.magnitude <= hi_m:
        raise ConfigError(f"magnitude {params.magnitude} outside scaling range {scaling.magnitude}")
    if not lo_d <= params.distance_km <= hi_d or params.distance_km <= 0:
        raise ConfigError(f"distance {params.distance_km} outside scaling range {scaling.distance_km}")
    rng = np.random.default_rng(seed)
    sp = sp_interval_samples(params.distance_km, sample_rate)
    first_third = max(2, length // 3)
    if 1 + sp >= length:
        raise ConfigError(f"S-P interval of {sp} samples does not fit a trace of {length}")
    for _ in range(1000):
        p_index = int(rng.integers(1, first_third))
        s_index = p_index + sp
        if s_index < length:
            break
    else:
        # every draw so far landed too late; take the latest admissible onset
        p_index = int(rng.integers(1, length - sp))
        s_index = p_index + sp

    amp = 10.0 ** (0.5 * params.magnitude) / params.distance_km
    sign = 1.0 if params.polarity == "up" else -1.0
    baz = math.radians(params.back_azimuth_deg)
    wp = amp * ricker(length, p_index, 6.0, sample_rate)
    ws = amp * ricker(length, s_index, 3.0, sample_rate)
    trace = np.empty((3, length))
    trace[0] = math.sin(baz) * (wp + ws)
    trace[1] = math.cos(baz) * (wp + ws)
    trace[2] = sign * wp + 0.5 * ws
    trace += params.noise_level * rng.standard_normal((3, length))

    if station is None:
        station = (float(rng.uniform(-60.0, 60.0)), float(rng.uniform(-180.0, 180.0)))
    ev_lat, ev_lon = locate_epicenter(station[0], station[1], params.back_azimuth_deg, params.distance_km)
    record = WaveformRecord(
        trace=trace.astype(np.float32),
        sample_rate=float(sample_rate),
        trace_id=trace_id if trace_id is not None else f"synth-{seed}",
        p_index=p_index,
        s_index=s_index,
        magnitude=float(params.magnitude),
        distance_km=float(params.distance_km),
        back_azimuth_deg=float(params.back_azimuth_deg) % 360.0,
        polarity=params.polarity,
        station_lat_deg=station[0],
        station_lon_deg=station[1],
        event_lat_deg=ev_lat,
        event_lon_deg=ev_lon,
    )
    return record, make_labels(record, scaling)


@dataclass(frozen=True)
class SynthConfig:
    n: int = 256
    seed: int = 0
    length: int = 512
    sample_rate: float = 50.0
    magnitude_min: float = 0.0
    magnitude_max: float = 4.0
    distance_min: float = 5.0
    distance_max: float = 40.0
    noise_level: float = 0.01


def synth_dataset(cfg: SynthConfig, scaling: ScalingRanges = ScalingRanges()) -> list[tuple[WaveformRecord, SampleLabels]]:
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(cfg.n):
        params = EventParams(
            magnitude=float(rng.uniform(cfg.magnitude_min, cfg.magnitude_max)),
            distance_km=float(rng.uniform(cfg.distance_min, cfg.distance_max)),
            back_azimuth_deg=float(rng.uniform(0.0, 360.0)),
            polarity="up" if rng.random() < 0.5 else "down",
            noise_level=cfg.noise_level,
        )
        seed = int(rng.integers(0, 2**31 - 1))
        out.append(synth_event(params, seed, cfg.length, cfg.sample_rate, scaling, trace_id=f"synth{cfg.seed}_{i:06d}"))
    return out


# --------------------------------------------------------------------------
# dataset stores


def padded_length(length: int, multiple: int = 64) -> int:
    return int(math.ceil(length / multiple) * multiple)


def pad_record(record: WaveformRecord, multiple: int = 64) -> WaveformRecord:
    n = record.length
    target = padded_length(n, multiple)
    if target == n:
        return record
    trace = np.zeros((3, target), dtype=record.trace.dtype)
    trace[:, :n] = record.trace
    return replace(record, trace=trace, pad_length=target - n)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_store(
    records: Sequence[WaveformRecord],
    out_dir: str | os.PathLike,
    kind: str = "hdf5",
    pad_multiple: int = 64,
) -> Path:
    """Write traces + metadata + manifest; returns the manifest path."""
    if not records:
        raise ValueError("no records to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sr = records[0].sample_rate
    n = records[0].length
    for r in records:
        if r.sample_rate != sr or r.length != n:
            raise DataFormatError(f"{r.trace_id!r}: all traces in a store share sample rate and length")
    if kind == "hdf5":
        import h5py

        store_path = "traces.h5"
        with h5py.File(out / store_path, "w") as h5:
            for r in records:
                h5.create_dataset(r.trace_id, data=np.asarray(r.trace, dtype=np.float32))
    elif kind == "npy":
        store_path = "traces"
        (out / store_path).mkdir(exist_ok=True)
        for r in records:
            np.save(out / store_path / f"{r.trace_id}.npy", np.asarray(r.trace, dtype=np.float32))
    else:
        raise ConfigError(f"unknown store kind {kind!r}")

    with open(out / "metadata.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METADATA_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.trace_id,
                    _fmt(r.p_index),
                    _fmt(r.s_index),
                    _fmt(r.magnitude),
                    _fmt(r.distance_km),
                    _fmt(r.back_azimuth_deg),
                    _fmt(r.polarity),
                    _fmt(r.station_lat_deg),
                    _fmt(r.station_lon_deg),
                    _fmt(r.event_lat_deg),
                    _fmt(r.event_lon_deg),
                ]
            )
    manifest = {
        "format": MANIFEST_FORMAT,
        "sample_rate": sr,
        "trace_length": n,
        "pad_multiple": pad_multiple,
        "store": {"kind": kind, "path": store_path},
        "metadata": "metadata.csv",
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _opt(row: dict, key: str, cast):
    v = row.get(key, "")
    return None if v is None or v.strip() == "" else cast(v)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    spec = json.loads(path.read_text())
    if spec.get("format") != MANIFEST_FORMAT:
        raise DataFormatError(f"{path}: unsupported manifest format {spec.get('format')!r}")
    root = path.parent
    entries = []
    with open(root / spec["metadata"], newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METADATA_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DataFormatError(f"{spec['metadata']}: missing columns {sorted(missing)}")
        for row in reader:
            tid = row["trace_id"]
            entries.append(
                ManifestEntry(
                    trace_id=tid,
                    locator=tid,
                    has_picks=bool(row["p_index"].strip()) and bool(row["s_index"].strip()),
                    has_magnitude=bool(row["magnitude"].strip()),
                    has_distance=bool(row["distance_km"].strip()),
                    has_azimuth=bool(row["back_azimuth_deg"].strip()),
                    has_polarity=bool(row["polarity"].strip()),
                    metadata=dict(row),
                )
            )
    return DatasetManifest(
        entries=tuple(entries),
        sample_rate=float(spec["sample_rate"]),
        trace_length=int(spec["trace_length"]),
        pad_multiple=int(spec.get("pad_multiple", 64)),
        store_kind=spec["store"]["kind"],
        store_path=spec["store"]["path"],
        root=str(root),
    )


def _read_array(manifest: DatasetManifest, locator: str) -> np.ndarray:
    base = Path(manifest.root) / manifest.store_path
    if manifest.store_kind == "hdf5":
        import h5py

        with h5py.File(base, "r") as h5:
            if locator not in h5:
                raise KeyError(f"trace {locator!r} missing from {base}")
            return np.asarray(h5[locator][()])
    if manifest.store_kind == "npy":
        f = base / f"{locator}.npy"
        if not f.exists():
            raise KeyError(f"trace {locator!r} missing from {base}")
        return np.load(f)
    raise ConfigError(f"unknown store kind {manifest.store_kind!r}")


def read_trace(manifest: DatasetManifest, trace_id: str) -> WaveformRecord:
    entry = next((e for e in manifest.entries if e.trace_id == trace_id), None)
    if entry is None:
        raise KeyError(f"unknown trace_id {trace_id!r}")
    arr = _read_array(manifest, entry.locator)
    if arr.ndim != 2 or arr.shape[0] != 3:
        raise DataFormatError(f"trace {trace_id!r}: expected 3 channels, got shape {arr.shape}")
    if arr.shape[1] != manifest.trace_length:
        raise DataFormatError(
            f"trace {trace_id!r}: length {arr.shape[1]} != manifest trace_length {manifest.trace_length}"
        )
    row = entry.metadata
    record = WaveformRecord(
        trace=arr.astype(np.float32),
        sample_rate=manifest.sample_rate,
        trace_id=trace_id,
        p_index=_opt(row, "p_index", int),
        s_index=_opt(row, "s_index", int),
        magnitude=_opt(row, "magnitude", float),
        distance_km=_opt(row, "distance_km", float),
        back_azimuth_deg=_opt(row, "back_azimuth_deg", float),
        polarity=_opt(row, "polarity", str),
        station_lat_deg=_opt(row, "station_lat", float),
        station_lon_deg=_opt(row, "station_lon", float),
        event_lat_deg=_opt(row, "event_lat", float),
        event_lon_deg=_opt(row, "event_lon", float),
    )
    return pad_record(record, manifest.pad_multiple)


def read_all(manifest: DatasetManifest) -> list[WaveformRecord]:
    return [read_trace(manifest, tid) for tid in manifest.trace_ids]


# --------------------------------------------------------------------------
# splits


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(math.floor(n * spec.train_fraction + 1e-9))
    n_val = int(math.floor(n * spec.val_fraction + 1e-9))
    # tiny manifests: a split with a positive fraction never ends up empty
    n_train = max(n_train, 1)
    n_val = max(n_val, 1)
    n_eval = n - n_train - n_val
    if n_eval < 1:
        raise ValueError(f"{n} entries are too few for a three-way split")
    return n_train, n_val, n_eval


def split_dataset(manifest: DatasetManifest, spec: SplitSpec) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    n_train, n_val, _ = split_sizes(n, spec)
    order = np.random.default_rng(spec.seed).permutation(n)
    entries = manifest.entries
    train = [entries[i] for i in order[:n_train]]
    val = [entries[i] for i in order[n_train : n_train + n_val]]
    ev = [entries[i] for i in order[n_train + n_val :]]
    return manifest.subset(train, "train"), manifest.subset(val, "val"), manifest.subset(ev, "eval")
