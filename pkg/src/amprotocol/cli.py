"""Command-line entry point: ``amprotocol [global flags] <stage>``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings

from .config import ConfigError, load_config
from .pipeline import STAGES, Run, StageDependencyError, run_all, run_stage
from .predictor import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_DIVERGENCE = 0, 2, 3, 4


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return v


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="INI configuration file")
    parser.add_argument("--seed", type=_u64, metavar="U64", default=argparse.SUPPRESS if suppress else 0, help="master seed (default 0)")
    parser.add_argument("--out", metavar="DIR", default=default, help="output root, overrides [paths] out")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False, help="only report errors")


def build_parser():
    parser = argparse.ArgumentParser(prog="amprotocol", description="Designed-porosity print protocol pipeline on simulated scans.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "phantom": "simulate prints of every design x setting x printer",
        "train-seg": "train the segmentation network on phantom slices",
        "segment": "segment every volume and tabulate porosity",
        "analyze": "void statistics, size histograms and roughness",
        "train-ann": "train the porosity predictor",
        "recommend": "rank process settings against the designed porosity",
        "report": "emit the summary tables as CSV and JSON",
        "run": "all stages in order",
    }
    for name in STAGES + ("run",):
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "recommend":
            p.add_argument("--designed", type=float, help="designed porosity in percent (default: the design's own)")
            p.add_argument("--top-k", type=int, help="rows in the JSON summary")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    warnings.simplefilter("ignore" if args.quiet else "default")
    try:
        overrides = {("paths", "out"): args.out} if args.out else None
        cfg = load_config(args.config, overrides)
        run = Run(cfg, args.seed)
        if args.command == "run":
            run_all(run)
        elif args.command == "recommend":
            run_stage(run, "recommend", designed=args.designed, top_k=args.top_k)
        else:
            run_stage(run, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDependencyError as exc:
        print(f"stage dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
