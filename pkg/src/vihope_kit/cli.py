"""Command-line entry point.

Commands:
    vihope gen-data  --config cfg.json [--seed N] [--out DIR]
    vihope train ae|completion|pose|e2e --config cfg.json [--resume]
                 [--ablate NAME] [--seed N] [--out DIR]
    vihope eval --config cfg.json [--stage pose|e2e|auto] [--ablate NAME]
                 [--sweep occlusion|tactile] [--plot] [--seed N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 numeric failure (training diverged). ``VIHOPE_KIT_THREADS`` caps the
worker-thread count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .config import RunConfig, load_config, save_config
from .errors import ConfigError, MissingPrerequisiteError, TrainingDivergedError

EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4


def _apply_thread_cap() -> None:
    cap = os.environ.get("VIHOPE_KIT_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"VIHOPE_KIT_THREADS must be an integer, got {cap!r}")
    import torch

    torch.set_num_threads(n)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=str(args.out))
    return cfg


def cmd_gen_data(args) -> int:
    from .dataio import validate_dataset
    from .synthdata import generate_dataset

    cfg = _load_run_config(args)
    out = args.out if args.out else cfg.dataset.path
    manifest = generate_dataset(cfg.dataset, cfg.seed, out_dir=out)
    report = validate_dataset(out)
    print(f"dataset written to {out}")
    print(json.dumps({"seed": manifest.seed, **report}, indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .training import run_stage

    cfg = _load_run_config(args)
    result = run_stage(cfg, args.stage, resume=args.resume, variant=args.ablate,
                       log=print)
    print(json.dumps({k: v for k, v in result.items()}, sort_keys=True, default=float))
    return 0


def cmd_eval(args) -> int:
    from .dataio import Dataset
    from .evaluate import (
        plot_occlusion_sweep,
        plot_tactile_sweep,
        run_evaluation,
        tactile_sweep,
        write_report,
    )
    from .training import load_pipeline

    cfg = _load_run_config(args)
    dataset = Dataset(cfg.dataset.path)
    pipeline, stage = load_pipeline(cfg, args.stage)
    run_dir = Path(cfg.out_dir)
    save_config(cfg, run_dir / "config.json")
    label = args.ablate or pipeline.wiring.name
    if args.sweep == "tactile":
        reports = tactile_sweep(pipeline, dataset, args.split, cfg)
        base = run_dir / "eval" / f"{stage}_tactile_sweep"
        for n, rep in sorted(reports.items()):
            write_report(rep, base / f"n_{n:03d}")
        if args.plot:
            plot_tactile_sweep(reports, base / "angular_vs_tactile.png")
        means = {n: rep.summary["metrics"]["angular_error_deg"]["mean"]
                 for n, rep in sorted(reports.items())}
        print(json.dumps({"sweep": "tactile", "angular_error_deg": means},
                         indent=2, sort_keys=True))
        return 0
    report = run_evaluation(pipeline, dataset, args.split, cfg, ablate=args.ablate)
    out = write_report(report, run_dir / "eval" / f"{stage}_{label}")
    if args.sweep == "occlusion" and args.plot:
        plot_occlusion_sweep(report.summary, out / "add_vs_occlusion.png")
    elif args.plot:
        plot_occlusion_sweep(report.summary, out / "add_vs_occlusion.png")
    print(json.dumps(report.summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vihope",
                                     description="visuotactile shape completion and pose estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")

    p_gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    p_train = sub.add_parser("train", help="run one training stage")
    p_train.add_argument("stage", choices=["ae", "completion", "pose", "e2e"])
    common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="continue an interrupted stage from its checkpoint")
    p_train.add_argument("--ablate", default=None,
                         help="train an ablation variant (e.g. No-Tactile)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a trained run")
    common(p_eval)
    p_eval.add_argument("--stage", default="auto", choices=["auto", "pose", "e2e"])
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--ablate", default=None, help="evaluate an ablation variant")
    p_eval.add_argument("--sweep", default=None, choices=["occlusion", "tactile"])
    p_eval.add_argument("--plot", action="store_true", help="emit line charts as PNG files")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except TrainingDivergedError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
