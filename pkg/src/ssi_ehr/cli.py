"""Command line entry point: ``ssi scenario run`` and ``ssi bench``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ssi_ehr.encoding import canonical_json
from ssi_ehr.harness import (
    BENCH_OPS,
    EXIT_OK,
    EXIT_USAGE,
    reports_to_csv,
    run_bench,
    run_scenario,
    transcript_lines,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 already; keep the message terse
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssi", description="Patient-controlled health record SSI toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    scenario = sub.add_parser("scenario", help="scripted multi-actor episodes")
    scenario_sub = scenario.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = scenario_sub.add_parser("run", help="run a scenario script")
    run.add_argument("file", help="scenario file (canonical JSON)")
    run.add_argument("--seed", type=int, default=None, help="override the script's RNG seed")
    run.add_argument("--snapshot", type=Path, default=None, help="write ledger+mediator state here")

    bench = sub.add_parser("bench", help="latency and throughput benchmarks")
    bench.add_argument(
        "--ops",
        default=",".join(BENCH_OPS),
        help=f"comma-separated subset of: {', '.join(BENCH_OPS)}",
    )
    bench.add_argument("--iters", type=int, default=10_000)
    bench.add_argument("--tps", type=float, default=None, help="target submit rate for write_did")
    bench.add_argument("--csv", type=Path, default=None, help="write the report CSV here")
    return parser


def _scenario(args) -> int:
    code, transcript, runner = run_scenario(args.file, seed=args.seed)
    sys.stdout.write(transcript_lines(transcript))
    if runner is not None and args.snapshot is not None:
        args.snapshot.write_bytes(canonical_json(runner.snapshot()))
    if code != EXIT_OK:
        print(f"ssi: {transcript[-1]['message']}", file=sys.stderr)
    return code


def _bench(args) -> int:
    ops = [op.strip() for op in args.ops.split(",") if op.strip()]
    if args.iters < 0:
        print("ssi: --iters must be >= 0", file=sys.stderr)
        return EXIT_USAGE
    try:
        reports = run_bench(ops, args.iters, args.tps)
    except ValueError as exc:
        print(f"ssi: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = reports_to_csv(reports)
    if args.csv is not None:
        args.csv.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "scenario":
        return _scenario(args)
    return _bench(args)


if __name__ == "__main__":
    sys.exit(main())
