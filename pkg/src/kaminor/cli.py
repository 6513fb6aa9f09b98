"""Command line entry point: ``kaminor <kind> --config CONFIG --out DIR [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .exterior import CapacityError
from .harness import KINDS, ConfigError, run

log = logging.getLogger("kaminor")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kaminor", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind, help=f"run a {kind} experiment")
        sp.add_argument("--config", required=True, type=Path, help="JSON experiment config")
        sp.add_argument("--out", type=Path, help="output directory (default: config outputDir)")
        sp.add_argument("--seed", type=int, help="override the config seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        config = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    if not isinstance(config, dict):
        print("error: config: expected a JSON object", file=sys.stderr)
        return 2
    if config.setdefault("kind", args.command) != args.command:
        print(f"error: kind: config says {config['kind']!r} but the subcommand is {args.command!r}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config["seed"] = args.seed
    out = args.out or config.get("outputDir")
    if out is None:
        print("error: outputDir: give --out or set outputDir in the config", file=sys.stderr)
        return 2
    try:
        manifest = run(config, out, base_dir=args.config.parent)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CapacityError as exc:
        print(f"error: capacity: {exc}", file=sys.stderr)
        return 3
    log.info("wrote %s", manifest)
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
