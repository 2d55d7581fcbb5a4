"""Experiment configs (INI files), dataset splits, variant builds and run drivers.

Config layout::

    [experiment]   task, variant, n_layers, seed, setting, checkpoint, variants, seeds
    [data]         manifest   (empty: generate the [synth] set in memory)
    [synth]        SynthConfig fields
    [split]        train_fraction, val_fraction, eval_fraction
    [scaling]      magnitude, distance_km   ("lo, hi")
    [train]        TrainConfig fields
    [augment]      AugmentationSpec fields
    [eval]         EvalConfig fields
    [model]        ModelDims fields

There is a single seed, ``experiment.seed``; it drives the split, the
synthetic generator, weight init, batching and augmentation alike.
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
import os
import types
import typing
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import AugmentationSpec
from .data import (
    ConfigError,
    DatasetManifest,
    ScalingRanges,
    SplitSpec,
    SynthConfig,
    load_manifest,
    make_labels,
    read_all,
    split_dataset,
    split_sizes,
    synth_dataset,
)
from .evaluation import EvalConfig, EvalReport, emit_report, evaluate
from .model.gpt2 import CheckpointReader, find_checkpoint
from .model.network import PRETRAINED_VARIANTS, VARIANTS, ModelDims, SeisMoLLM, assemble, load_model, save_model, variant_layers
from .train import Sample, TrainConfig, TrainHistory, fit

log = logging.getLogger(__name__)

SETTINGS = ("standard", "few_shot")
# which record attribute a task needs
TASK_LABEL = {"azimuth": "back_azimuth_deg", "distance": "distance_km", "magnitude": "magnitude", "polarity": "polarity"}


@dataclass(frozen=True)
class DataSource:
    manifest: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "distance"
    variant: str = "full"
    n_layers: int | None = None
    seed: int = 0
    setting: str = "standard"
    checkpoint: str = ""
    # matrix runs; empty means just (variant, seed)
    variants: tuple[str, ...] = ()
    seeds: tuple[int, ...] = ()
    data: DataSource = DataSource()
    synth: SynthConfig = SynthConfig()
    split: SplitSpec = SplitSpec()
    scaling: ScalingRanges = ScalingRanges()
    train: TrainConfig = TrainConfig()
    augment: AugmentationSpec = AugmentationSpec()
    eval: EvalConfig = EvalConfig()
    model: ModelDims = ModelDims()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r} in experiment.variants")
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        forced = variant_layers(self.variant, 3)
        if self.n_layers is None:
            object.__setattr__(self, "n_layers", forced)
        elif self.variant in ("full", "no_pretrain", "no_conv"):
            if self.n_layers < 1:
                raise ConfigError(f"variant {self.variant!r} needs n_layers >= 1")
        elif self.n_layers != forced:
            raise ConfigError(f"variant {self.variant!r} forces n_layers = {forced}, got {self.n_layers}")
        # the experiment seed is the only seed
        object.__setattr__(self, "split", replace(self.split, seed=self.seed))
        object.__setattr__(self, "synth", replace(self.synth, seed=self.seed))
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        object.__setattr__(self, "augment", replace(self.augment, seed=self.seed))

    @property
    def dims(self) -> ModelDims:
        return self.model

    def with_run(self, variant: str, seed: int) -> "ExperimentConfig":
        n_layers = self.n_layers if variant == self.variant else None
        return replace(self, variant=variant, seed=seed, n_layers=n_layers, variants=(), seeds=())


# --------------------------------------------------------------------------
# INI load / save

SECTIONS = ("experiment", "data", "synth", "split", "scaling", "train", "augment", "eval", "model")
# keys derived from experiment.seed, never read from a sub-section
_DERIVED = {"seed"}


def _section_class(section: str):
    if section == "experiment":
        return ExperimentConfig
    return typing.get_type_hints(ExperimentConfig)[section]


def _section_fields(section: str) -> dict[str, object]:
    cls = _section_class(section)
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        if section == "experiment" and f.name in SECTIONS:
            continue
        if section != "experiment" and f.name in _DERIVED:
            continue
        out[f.name] = hints[f.name]
    return out


def _coerce(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    s = text.strip()
    if origin in (typing.Union, types.UnionType):
        if s.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(s, inner[0], key)
    if origin is tuple:
        parts = [p.strip() for p in s.strip("()[]").split(",") if p.strip()]
        elem = args[0] if args else str
        return tuple(_coerce(p, elem, key) for p in parts)
    try:
        if tp is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if tp is int:
            return int(s)
        if tp is float:
            return float(s)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None
    return s


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def resolve_key(key: str) -> tuple[str, str]:
    """``section.field`` as given, or a bare field name if it is unambiguous."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS or name not in _section_fields(section):
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    if key in _section_fields("experiment"):
        return "experiment", key
    hits = [s for s in SECTIONS if key in _section_fields(s)]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous config key {key!r}; use one of {', '.join(f'{s}.{key}' for s in hits)}")
    return hits[0], key


def parse_overrides(items: Sequence[str]) -> list[tuple[str, str, str]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        section, name = resolve_key(key.strip())
        out.append((section, name, value))
    return out


def config_from_sections(raw: Mapping[str, Mapping[str, str]], overrides: Sequence[str] = ()) -> ExperimentConfig:
    sections: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    for section, items in raw.items():
        if section == "DEFAULT" and not items:
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in items.items():
            resolve_key(f"{section}.{key}")
            sections[section][key] = value
    for section, name, value in parse_overrides(overrides):  # last wins
        sections[section][name] = value

    built = {}
    for section in SECTIONS[1:]:
        fields = _section_fields(section)
        kwargs = {k: _coerce(v, fields[k], f"{section}.{k}") for k, v in sections[section].items()}
        try:
            built[section] = _section_class(section)(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    fields = _section_fields("experiment")
    top = {k: _coerce(v, fields[k], f"experiment.{k}") for k, v in sections["experiment"].items()}
    return ExperimentConfig(**top, **built)


def load_config(path: str | os.PathLike, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    return config_from_sections(raw, overrides)


def config_to_sections(cfg: ExperimentConfig) -> dict[str, dict[str, str]]:
    out = {"experiment": {k: _format(getattr(cfg, k)) for k in _section_fields("experiment")}}
    for section in SECTIONS[1:]:
        obj = getattr(cfg, section)
        out[section] = {k: _format(getattr(obj, k)) for k in _section_fields(section)}
    return out


def save_config(cfg: ExperimentConfig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_dict(config_to_sections(cfg))
    with open(path, "w") as fh:
        parser.write(fh)
    return path


# --------------------------------------------------------------------------
# data


def few_shot_split(manifest: DatasetManifest, train_fraction: float, val_fraction: float, seed: int = 0):
    """Small train/val fractions, everything else goes to evaluation; tags the subsets ``few_shot:*``."""
    spec = SplitSpec(train_fraction, val_fraction, 1.0 - train_fraction - val_fraction, seed)
    parts = split_dataset(manifest, spec)
    return tuple(p.subset(p.entries, f"few_shot:{name}") for p, name in zip(parts, ("train", "val", "eval")))


def split_samples(samples: Sequence[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """In-memory counterpart of :func:`split_dataset` (same sizes and permutation)."""
    n_train, n_val, _ = split_sizes(len(samples), spec)
    order = np.random.default_rng(spec.seed).permutation(len(samples))
    pick = lambda idx: [samples[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


def _usable(samples: Sequence[Sample], task: str) -> list[Sample]:
    attr = TASK_LABEL.get(task)
    if attr is None:
        return list(samples)
    kept = [s for s in samples if getattr(s[0], attr) is not None]
    if len(kept) < len(samples):
        log.info("%s: dropped %d samples without a %s label", task, len(samples) - len(kept), attr)
    return kept


def load_splits(cfg: ExperimentConfig) -> tuple[list[Sample], list[Sample], list[Sample]]:
    if cfg.data.manifest:
        manifest = load_manifest(cfg.data.manifest)
        if cfg.setting == "few_shot":
            parts = few_shot_split(manifest, cfg.split.train_fraction, cfg.split.val_fraction, cfg.seed)
        else:
            parts = split_dataset(manifest, cfg.split)
        splits = tuple([(r, make_labels(r, cfg.scaling)) for r in read_all(p)] for p in parts)
    else:
        splits = split_samples(synth_dataset(cfg.synth, cfg.scaling), cfg.split)
    return tuple(_usable(s, cfg.task) for s in splits)


# --------------------------------------------------------------------------
# models and runs


def open_checkpoint(cfg: ExperimentConfig, checkpoint=None):
    """A checkpoint mapping for pre-trained variants; ``None`` for the rest (never opened)."""
    if cfg.variant not in PRETRAINED_VARIANTS:
        return None
    if isinstance(checkpoint, Mapping):
        return checkpoint
    path = find_checkpoint(checkpoint or cfg.checkpoint or None)
    if path is None:
        raise ConfigError(
            f"variant {cfg.variant!r} needs GPT-2 weights: pass --checkpoint, set experiment.checkpoint or SEISMOLLM_CACHE"
        )
    return CheckpointReader(path)


def build_variant(cfg: ExperimentConfig, checkpoint=None) -> SeisMoLLM:
    """``checkpoint`` may be a path, a tensor mapping or None (falls back to the config / environment)."""
    ckpt = open_checkpoint(cfg, checkpoint)
    return assemble(cfg.task, cfg.variant, cfg.n_layers, cfg.model, ckpt, cfg.seed)


@dataclass
class RunResult:
    config: ExperimentConfig
    out_dir: Path
    model: SeisMoLLM
    history: TrainHistory | None = None
    report: EvalReport | None = None
    files: dict = field(default_factory=dict)


MODEL_FILE = "model.pt"
CONFIG_FILE = "config.ini"


def train_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike, checkpoint=None, device: str = "cpu") -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / CONFIG_FILE)
    train, val, _ = load_splits(cfg)
    model = build_variant(cfg, checkpoint)
    record = config_to_sections(cfg)
    train_cfg = replace(cfg.train, log_path=str(out / "train_log.jsonl"))
    log_file = Path(train_cfg.log_path)
    if log_file.exists():
        log_file.unlink()
    model, history = fit(model, train, val, cfg.task, train_cfg, cfg.augment if cfg.train.augment else None,
                         out_path=out / MODEL_FILE, config_record=record, device=device)
    save_model(model, out / MODEL_FILE, record)
    return RunResult(cfg, out, model, history)


def evaluate_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike, model: SeisMoLLM | None = None,
                        device: str = "cpu") -> RunResult:
    out = Path(out_dir)
    if model is None:
        path = out / MODEL_FILE
        if not path.exists():
            raise ConfigError(f"no trained model at {path}; run train first")
        model, _ = load_model(path)
    _, _, ev = load_splits(cfg)
    report = evaluate(model, ev, cfg.task, cfg.eval, cfg.scaling, device)
    report.setting = cfg.setting
    files = emit_report(report, out / "report", cfg.eval.hist_bins)
    return RunResult(cfg, out, model, report=report, files=files)


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike, checkpoint=None, device: str = "cpu") -> RunResult:
    trained = train_experiment(cfg, out_dir, checkpoint, device)
    result = evaluate_experiment(cfg, out_dir, trained.model, device)
    result.history = trained.history
    return result


def expand_matrix(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    variants = cfg.variants or (cfg.variant,)
    seeds = cfg.seeds or (cfg.seed,)
    return [cfg.with_run(v, s) for v in variants for s in seeds]


def run_matrix(cfg: ExperimentConfig, out_dir: str | os.PathLike, checkpoint=None, device: str = "cpu") -> list[RunResult]:
    """Every (variant, seed) pair in its own ``<variant>_seed<k>`` directory."""
    results = []
    for run in expand_matrix(cfg):
        sub = Path(out_dir) / f"{run.variant}_seed{run.seed}"
        log.info("matrix run %s", sub.name)
        torch.manual_seed(run.seed)
        results.append(run_experiment(run, sub, checkpoint, device))
    return results
