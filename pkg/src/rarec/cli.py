"""Command-line entry point: ``rarec <command> [--config PATH] [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import config as config_mod
from . import pipeline
from .alignment import VARIANTS

COMMANDS = {
    "generate": pipeline.cmd_generate,
    "pretrain": pipeline.cmd_pretrain,
    "build-align-set": pipeline.cmd_build_align_set,
    "train-align": pipeline.cmd_train_align,
    "eval": pipeline.cmd_eval,
    "export": pipeline.cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rarec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file (defaults are used for missing keys)")
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--seed", type=int, help="global seed, unsigned 64-bit (overrides run.seed)")
        p.add_argument("--variant", choices=VARIANTS, help="alignment variant (overrides alignment.variant)")
        p.add_argument("--mode", choices=("efficient", "random", "all"),
                       help="align-set construction (overrides alignment.mode)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    if args.out is not None:
        cfg.run.out = args.out
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.variant is not None:
        cfg.alignment.variant = args.variant
    if args.mode is not None:
        cfg.alignment.mode = args.mode
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        print(COMMANDS[args.command](cfg))
    except Exception as exc:  # report every failure as one parsable line
        message = " ".join(str(exc).split())
        print(f"error={type(exc).__name__} command={args.command} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
