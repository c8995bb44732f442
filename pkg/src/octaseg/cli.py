"""Command line entry point.

Subcommands cover the full workflow: generate data, train, infer, evaluate,
run the ablation grid and render report figures. Exit code 0 on success,
2 on invalid inputs or configuration, 3 on training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .config import (ABLATION_VARIANTS, SynthSpec, apply_variant, load_config)
from .dataset import load_dataset, materialize_synthetic
from .errors import (CheckpointError, DataLoadError, DivergenceError,
                     ValidationError)
from .inference import run_inference
from .model import load_checkpoint
from .report import run_ablation, run_evaluation
from .training import RunRecord, train_model


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octaseg",
        description="Cascaded region and vessel segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--variant", default="M*3", choices=list(ABLATION_VARIANTS))
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("infer", help="predict masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--mc-samples", type=int, default=0,
                   help="stochastic passes for uncertainty maps (0 = off)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--mc-samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and score every variant")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="*", default=None,
                   help="subset of variants (default: all)")

    p = sub.add_parser("report", help="render figures for a finished run")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mc-samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_synth_data(args) -> int:
    spec = SynthSpec(image_size=args.size)
    ids = materialize_synthetic(args.out, args.count, args.seed, spec)
    print(f"wrote {len(ids)} samples under {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    cfg = dataclasses.replace(cfg, train=apply_variant(cfg.train, args.variant))
    dataset = load_dataset(args.data, boundary_method=cfg.boundary_method)
    model, record = train_model(cfg, dataset, args.out, variant=args.variant,
                                resume=args.resume)
    last = record.epoch_losses[-1]
    print(f"trained {record.epochs} epochs, final total loss "
          f"{last['total']:.4f}, artifacts in {args.out}")
    return 0


def _cmd_infer(args) -> int:
    manifest = run_inference(args.checkpoint, args.input, args.out,
                             mc_samples=args.mc_samples, seed=args.seed)
    print(f"predicted {len(manifest['images'])} images into {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    samples = getattr(dataset, args.split)
    if not samples:
        raise ValidationError(f"split {args.split!r} is empty")
    record = None
    record_path = Path(args.checkpoint).parent / "record.json"
    if record_path.is_file():
        record = RunRecord.from_json(record_path)
    summary = run_evaluation(model, samples, args.out, record,
                             mc_samples=args.mc_samples, seed=args.seed)
    print(f"region dice {summary['region_dice']:.4f}, "
          f"vessel dice {summary['vessel_dice']:.4f}; report in {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.overrides)
    dataset = load_dataset(args.data, boundary_method=cfg.boundary_method)
    results = run_ablation(cfg, dataset, args.out, args.variants)
    for name, res in results.items():
        print(f"{name}: region {res['region_dice']:.4f}, "
              f"vessel {res['vessel_dice']:.4f}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    model, _ = load_checkpoint(run_dir / "checkpoint.pt")
    record = RunRecord.from_json(run_dir / "record.json")
    dataset = load_dataset(args.data)
    run_evaluation(model, dataset.test, args.out, record,
                   mc_samples=args.mc_samples, seed=args.seed)
    print(f"report written to {args.out}")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, DataLoadError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
