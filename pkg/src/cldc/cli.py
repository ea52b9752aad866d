"""Command line entry point: ``cldc run | report | probe``.

Exit codes: 0 success, 1 missing artifacts, 2 invalid configuration,
3 numeric fault during training (artifacts written so far are kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .errors import ConfigError, NumericFaultError

EXIT_MISSING = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldc", description="Continual RL with changing action sets")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate every seed of a configuration")
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. a2c.gamma=0.95 (repeatable)")
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("report", help="aggregate every run set under a directory")
    p.add_argument("--runs", required=True)

    p = sub.add_parser("probe", help="decode accuracy and embeddings for a saved representation")
    p.add_argument("--run", required=True, help="seed directory of an AACL run")
    p.add_argument("--task", type=int, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg = harness.load_config(args.config, args.overrides)
            if args.print_config:
                print(json.dumps(cfg, indent=2, sort_keys=True))
                return 0
            rep = harness.run(cfg, args.jobs)
            r, f, t = rep["continual_return"], rep["forgetting"], rep["forward_transfer"]
            print(f"{cfg['method']}: R={r['mean']:.3f} F={_num(f['mean'])} T={_num(t['mean'])} -> {harness.run_dir(cfg)}")
        elif args.command == "report":
            print(harness.write_report(args.runs), end="")
        else:
            print(json.dumps(harness.probe(args.run, args.task), indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFaultError as exc:
        print(f"numeric fault: {exc} (partial artifacts kept)", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    return 0


def _num(x) -> str:
    return "--" if x is None else f"{x:.3f}"


if __name__ == "__main__":
    sys.exit(main())
