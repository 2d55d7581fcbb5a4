"""``seismollm`` command line: synth, train, eval, ablate, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .data import ConfigError, synth_dataset, write_store
from .evaluation import emit_report, load_report
from .experiments import (
    ExperimentConfig,
    evaluate_experiment,
    load_config,
    run_matrix,
    save_config,
    train_experiment,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
VERBS = ("synth", "train", "eval", "ablate", "report")

log = logging.getLogger("seismollm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seismollm", description="Seismic monitoring with a LoRA-adapted GPT-2 backbone.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    helps = {
        "synth": "write a synthetic dataset store and manifest",
        "train": "train one model",
        "eval": "evaluate a trained model and write its report",
        "ablate": "train and evaluate every variant x seed in the config",
        "report": "re-render a report from dumped metrics and residuals",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, help=helps[verb])
        p.add_argument("--config", required=True, help="experiment config file (INI)")
        p.add_argument("--override", nargs="+", default=[], metavar="K=V", help="dotted key=value overrides, last wins")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="GPT-2 checkpoint file or directory (default: $SEISMOLLM_CACHE)")
        p.add_argument("--device", default="cpu", help="torch device (default cpu)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def default_out(cfg: ExperimentConfig, verb: str) -> Path:
    if verb == "synth":
        return Path(cfg.data.manifest).parent if cfg.data.manifest else Path(f"synth_seed{cfg.seed}")
    if verb == "ablate":
        return Path(f"runs/{cfg.task}_matrix")
    return Path(f"runs/{cfg.task}_{cfg.variant}_seed{cfg.seed}")


def _device(name: str) -> str:
    try:
        dev = torch.device(name)
    except RuntimeError as exc:
        raise ConfigError(f"bad device {name!r}: {exc}") from None
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ConfigError(f"device {name!r} requested but CUDA is not available")
    return str(dev)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.override)
    device = _device(args.device)
    out = Path(args.out) if args.out else default_out(cfg, args.verb)

    if args.verb == "synth":
        records = [r for r, _ in synth_dataset(cfg.synth, cfg.scaling)]
        path = write_store(records, out)
        save_config(cfg, out / "config.ini")
        print(f"wrote {len(records)} traces: {path}")
    elif args.verb == "train":
        result = train_experiment(cfg, out, args.checkpoint, device)
        h = result.history
        print(f"trained {cfg.task}/{cfg.variant}: best val loss {h.best_val:.6g} at epoch {h.best_epoch}; {out / 'model.pt'}")
    elif args.verb == "eval":
        save_config(cfg, out / "eval_config.ini")
        result = evaluate_experiment(cfg, out, device=device)
        print(f"evaluated {cfg.task} on {result.report.n} samples: {result.files['metrics']}")
    elif args.verb == "ablate":
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.ini")
        results = run_matrix(cfg, out, args.checkpoint, device)
        for r in results:
            print(f"{r.out_dir.name}: {r.files['metrics']}")
    elif args.verb == "report":
        report_dir = out / "report" if (out / "report").is_dir() else out
        if not (report_dir / "metrics.tsv").exists():
            raise FileNotFoundError(f"no metrics.tsv under {out}")
        files = emit_report(load_report(report_dir), report_dir, cfg.eval.hist_bins)
        print(f"re-rendered {files['table']}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"seismollm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # one-line diagnostic, no traceback
        if args.verbose:
            raise
        print(f"seismollm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
