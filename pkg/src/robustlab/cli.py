"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 stage failure, 3 invariant
violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .harness import STAGES, InvariantViolation, StageError, emit_report, load_report

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_INVARIANT = 0, 1, 2, 3


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: config error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustlab", description="Adversarial robustness experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in list(STAGES) + ["report"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=_u64, help="master seed (u64)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override; value parsed as JSON, else string")
        if name == "report":
            p.add_argument("report", help="report.json to re-emit")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            report = load_report(args.report)
            out = args.out or str(Path(args.report).parent)
            for path in emit_report(report, out):
                print(path)
            return EXIT_OK
        cfg = load_config(args.config, args.override, kind=args.command, seed=args.seed, out=args.out)
        report = STAGES[args.command](cfg)
        print(f"{cfg.kind}: wrote {cfg.out}/report.json")
        for name, stage in sorted(report.stages.items()):
            if name != "data":
                print(f"  {name}: {_summary(stage)}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        if args.command == "report":
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def _summary(stage: dict) -> str:
    keys = [k for k, v in stage.items() if isinstance(v, (int, float, str, bool)) or v is None]
    return ", ".join(f"{k}={stage[k]}" for k in keys[:8])


if __name__ == "__main__":
    sys.exit(main())
