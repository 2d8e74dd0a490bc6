"""Command-line entry point: ``ris-control {train,eval,sweep,arr,render}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, validate
from .experiments import run_config

COMMANDS = {
    "train": ("train",),
    "eval": ("eval",),
    "sweep": ("sweep",),
    "arr": ("arr",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ris-control", description="RIS phase control experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train the trajectory predictor and the diffusion policy"),
                            ("eval", "run control intervals for the configured policies"),
                            ("sweep", "power / element-count sweeps and the schedule ablation"),
                            ("arr", "achievable-rate-ratio matrix across interferer counts"),
                            ("render", "draw charts from the CSVs in a run directory")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="YAML config (defaults: desk-scale)")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed; sets train_seed and shifts the evaluation seeds")
        p.add_argument("--out", type=Path, default=None, help="run directory (overrides out_dir)")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train_seed = args.seed
        cfg.seeds = [args.seed + i for i in range(len(cfg.seeds))]
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return validate(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    if args.command == "render":
        from .plots import emit_outputs
        for path in emit_outputs(out):
            print(path)
        return 0
    run_config(cfg, out, COMMANDS[args.command], log=lambda msg: print(msg, file=sys.stderr))
    print(out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
