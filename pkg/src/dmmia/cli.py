"""Command-line entry point: ``dmmia <subcommand> --config FILE``.

Exit codes: 0 success, 1 user-facing failure (bad config, missing or
mismatched inputs, numerical failure), 2 unexpected internal error.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback

from . import config as config_mod
from . import pipeline
from .errors import DmmiaError


class UsageError(DmmiaError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


HELP = {
    "prepare-data": "load or synthesize digits and write the public/private IDX splits",
    "train-target": "train the target classifier on the private training split",
    "train-eval": "train the independent evaluation classifier",
    "pretrain-generator": "fit the synthesis network on the public split",
    "attack": "invert every private class with each configured method",
    "evaluate": "score attack images against the private data",
    "report": "summarize metrics per method and render image grids",
    "sweep": "grid over prototype settings, one report row per cell",
    "theory-check": "run the numerical theory checks and write their CSV",
    "run-all": "prepare-data through report in order",
}


def build_parser():
    parser = _Parser(prog="dmmia", description="Desk-scale model inversion lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", help="override out_dir from the config")
        p.add_argument("--force", action="store_true", help="accept upstream artifacts from a different config")
        if name == "attack":
            p.add_argument("--workers", type=int, help="parallel attack threads")
    return parser


def _run(args):
    cfg = config_mod.load(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.command == "run-all":
        result = pipeline.run_all(cfg, force=args.force)
    elif args.command == "attack":
        result = pipeline.attack(cfg, force=args.force, workers=args.workers)
    else:
        result = pipeline.STAGES[args.command](cfg, force=args.force)
    if args.command in ("report", "run-all"):
        print(pipeline.format_table(result))
    elif args.command == "theory-check":
        failed = [r.check for r in result if not r.passed]
        print(f"{len(result) - len(failed)}/{len(result)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
        if failed:
            return 1
    print(f"{args.command}: done ({cfg.out_dir}, config {cfg.digest()})")
    return 0


def _fail(kind, message, command):
    print(json.dumps({"error": kind, "message": message, "command": command}), file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return _run(args)
    except DmmiaError as exc:
        _fail(type(exc).__name__, str(exc), command)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        _fail("InternalError", f"{type(exc).__name__}: {exc}", command)
        traceback.print_exc(file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
