"""Command-line interface.

    mftlab <experiment> [--config cfg.json] [--out dir] [--seed N]

Experiments: gradcheck | sweep-disc | flow-closeness | converge | w2-diag |
probe.  Exit codes: 0 pass, 1 assertion fail, 2 config error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import sys

from ..flow import FlowDivergenceError
from ..model import NonFiniteStateError
from . import config as config_mod
from .config import ConfigError
from .experiments import RUNNERS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mftlab", description=__doc__)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None, help="JSON config file (defaults built in)")
        p.add_argument("--out", default=None, help="output directory (default out/<experiment>)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = args.out if args.out is not None else f"out/{args.experiment}"
    try:
        cfg = config_mod.load(args.experiment, args.config, seed_override=args.seed)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        result = RUNNERS[args.experiment](cfg, out_dir=out_dir)
    except (NonFiniteStateError, FlowDivergenceError) as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return 3
    status = "PASS" if result.passed else "FAIL"
    print(f"[{status}] {result.name}")
    for key, value in result.summary.items():
        print(f"  {key}: {value}")
    print(f"  outputs: {out_dir}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
