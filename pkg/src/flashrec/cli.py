"""Command-line entry point: ``flashrec run | analyze | sweep``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .harness import ConfigError, load_scenario, plot_series, rows_to_csv, run_scenario, sweep_scale
from .overhead import NoInteriorOptimum, analyze
from .protocol import Mode

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_UNRECOVERABLE = 2

log = logging.getLogger("flashrec")


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None
    if any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def cmd_run(args: argparse.Namespace) -> int:
    sc = load_scenario(args.config)
    changes = {}
    if args.mode is not None:
        changes["mode"] = Mode(args.mode)
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        sc = replace(sc, **changes)
    result = run_scenario(sc)
    _write(result.csv, args.out)
    if args.event_log:
        Path(args.event_log).write_text(result.event_log, encoding="utf-8")
    if result.exit_status != 0:
        print(f"unrecoverable: {result.failure_reason}", file=sys.stderr)
    return result.exit_status


def cmd_analyze(args: argparse.Namespace) -> int:
    try:
        report = analyze(args.d, args.m, args.s0, args.k0, args.step_time, args.s0_flash, args.s1_flash)
    except NoInteriorOptimum as err:
        raise ConfigError(str(err)) from None
    _write("\n".join(report.lines()) + "\n", args.out)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = load_scenario(args.config)
    points = sweep_scale(base, args.sizes)
    rows = [row for p in points for row in p.rows]
    _write(rows_to_csv(rows), args.out)
    if args.emit_plot_data:
        Path(args.emit_plot_data).write_text(plot_series(points), encoding="utf-8")
    return EXIT_UNRECOVERABLE if any(p.exit_status for p in points) else EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 like config errors; 2 is reserved for unrecoverable scenarios."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flashrec", description="Fault-tolerant training simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its metrics CSV")
    run.add_argument("--config", required=True, help="scenario JSON file")
    run.add_argument("--mode", choices=[m.value for m in Mode])
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="CSV destination (default stdout)")
    run.add_argument("--event-log", help="also write the transport event log here")
    run.set_defaults(func=cmd_run)

    an = sub.add_parser("analyze", help="evaluate the checkpoint overhead model")
    an.add_argument("--d", type=float, required=True, help="training period (s)")
    an.add_argument("--m", type=int, required=True, help="failures during the period")
    an.add_argument("--s0", type=float, required=True, help="recovery overhead per failure (s)")
    an.add_argument("--k0", type=float, required=True, help="checkpoint snapshot cost (s)")
    an.add_argument("--step-time", type=float, default=1.0, help="seconds per training step")
    an.add_argument("--s0-flash", type=float, help="replica recovery overhead (default: s0)")
    an.add_argument("--s1-flash", type=float, help="replica recovery lost work (default: one step)")
    an.add_argument("--out")
    an.set_defaults(func=cmd_analyze)

    sw = sub.add_parser("sweep", help="run one fault at several cluster sizes in both modes")
    sw.add_argument("--config", required=True)
    sw.add_argument("--sizes", type=_sizes, required=True, help="comma-separated device counts")
    sw.add_argument("--out")
    sw.add_argument("--emit-plot-data", metavar="PATH", help="write restart ticks per size as CSV series")
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:
        print(f"invalid argument: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
