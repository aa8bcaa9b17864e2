"""Command-line front end: ``noisygen {divergence,train,fed,sweep}``.

Exit status is 0 when every run completed.  On failure a one-line JSON
record ``{"error": ..., "message": ..., "key": ...}`` goes to stderr and the
status is 2 for configuration errors and 1 otherwise.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import experiments
from .config import ConfigError, RunConfig, load

COMMANDS = {
    "divergence": experiments.cmd_divergence,
    "train": experiments.cmd_train,
    "fed": experiments.cmd_fed,
    "sweep": experiments.cmd_sweep,
}


def _seed_list(text: str) -> list:
    try:
        return [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisygen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="config file (dotted key = JSON value)")
        p.add_argument("--out", required=True, help="CSV output path")
        p.add_argument("--seeds", type=_seed_list, help="override the seed list, e.g. 0,1,2")
        p.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config) if args.config else RunConfig()
        cfg["experiment"] = args.command
        if args.seeds is not None:
            cfg["seeds"] = args.seeds
        cols, rows = COMMANDS[args.command](cfg)
        experiments.write_csv(args.out, cols, rows, timestamp=not args.no_timestamp)
    except ConfigError as exc:
        _report(exc, getattr(exc, "key", None))
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a record
        _report(exc, None)
        return 1
    return 0


def _report(exc: Exception, key) -> None:
    record = {"error": type(exc).__name__, "message": str(exc), "key": key}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
