"""Run every stage for a config and render the charts.

    python scripts/run_experiments.py --config configs/desk.yaml --out runs/desk
"""

import argparse
import sys
from pathlib import Path

from ris_control import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "desk.yaml")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    args = parser.parse_args()
    common = ["--config", str(args.config)]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    if args.out is not None:
        common += ["--out", str(args.out)]
    for command in ("train", "eval", "sweep", "arr", "render"):
        code = cli.main([command, *common])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
