"""Command-line entry point.

Subcommands: attack-search, arch-search, evaluate, circuit-defense,
circuit-attack, report. Exit codes: 0 success, 2 validation/configuration
error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import (ArgumentError, ConfigError, FormatError, NumericError, ShapeError,
                     StateError, ValidationError)

_KIND_OF = {
    "attack-search": "attack_search",
    "arch-search": "arch_search",
    "evaluate": "evaluate",
    "circuit-defense": "circuit_defense",
    "circuit-attack": "circuit_attack",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="advsearch",
        description="Search for efficient composite adversarial attacks and "
                    "robust neural cell architectures.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*_KIND_OF, "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seeds")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel evaluations")
    return parser


def _run(args):
    with open(args.config) as f:
        config = json.load(f)
    if args.command == "report":
        from .harness import Ledger
        from .report import report

        ledger = Ledger(config["ledger"])
        records = ledger.read()
        select = config.get("select")
        if select is not None:
            records = [r for r in records if r["result"].get("kind") == select]
        written = report(records, args.out or config.get("out_dir", "reports"))
        for path in written:
            print(path)
        return 0
    from .harness import run_experiment

    expected = _KIND_OF[args.command]
    if config.get("kind") != expected:
        raise ValidationError([f"kind: config says {config.get('kind')!r}, "
                               f"subcommand expects {expected!r}"])
    records = run_experiment(config, out_dir=args.out, seed_override=args.seed,
                             jobs=args.jobs)
    for record in records:
        print(json.dumps({"hash": record["hash"],
                          "seed": record["result"].get("seed"),
                          "kind": record["result"].get("kind")}))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValidationError, ConfigError, ArgumentError, ShapeError, FormatError,
            StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
