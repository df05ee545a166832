"""Command-line interface: ``gcprof {run,bench,convert,validate,fuzz}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import bench as bench_mod
from . import firefox, fuzz
from .gprf import ProfileFormatError
from .workloads import WORKLOADS

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _size(text: str) -> int:
    """Byte counts with an optional k/m suffix (binary multiples)."""
    text = text.strip().lower().removesuffix("b").removesuffix("i")
    scale = 1
    if text and text[-1] in "km":
        scale = 1024 if text[-1] == "k" else 1024 * 1024
        text = text[:-1]
    try:
        value = int(text) * scale
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a byte count: {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("byte counts must be >= 0")
    return value


def _sizes(text: str) -> List[int]:
    return [_size(part) for part in text.split(",") if part.strip()]


def cmd_run(args) -> int:
    result = bench_mod.run(args.workload, args.sample_bytes, args.out,
                           nursery_size=args.nursery_bytes)
    print(result.summary())
    print(f"wrote {result.profile_bytes} bytes to {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    progress = None
    if args.verbose:
        def progress(result):
            print(result.summary(), file=sys.stderr)
    report = bench_mod.bench(args.workloads, args.periods, args.repetitions,
                             nursery_size=args.nursery_bytes, progress=progress)
    print(report.to_table())
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            report.to_csv(f)
        print(f"wrote {args.csv}")
    return EXIT_OK


def cmd_convert(args) -> int:
    data = Path(args.profile).read_bytes()
    processed = firefox.convert(data)
    out = args.out or str(Path(args.profile).with_suffix(".json"))
    Path(out).write_text(firefox.dumps(processed), encoding="utf-8")
    thread = processed["threads"][0]
    print(f"samples={thread['samples']['length']} markers={thread['markers']['length']} "
          f"counters={len(processed['counters'])} -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    processed = json.loads(Path(args.json).read_text(encoding="utf-8"))
    violations = firefox.validate(processed)
    for violation in violations:
        print(violation)
    print(f"{len(violations)} violation(s)")
    return EXIT_FAILURE if violations else EXIT_OK


def cmd_fuzz(args) -> int:
    if args.replay:
        actions = fuzz.load_actions(Path(args.replay).read_text())
        report = fuzz.execute_and_check(actions, seed="replay", shrink=args.shrink)
        if report.ok:
            print(f"replayed {len(actions)} actions: ok ({report.samples} samples)")
            return EXIT_OK
        print(f"replay failed: {report.failure}")
        return EXIT_FAILURE

    summary = fuzz.run_fuzz(args.seed, args.sequences, args.actions_per_sequence,
                            shrink=args.shrink)
    print(f"seed={summary.seed} sequences={summary.sequences} actions={summary.actions} "
          f"samples={summary.samples} minor_collections={summary.minor_collections} "
          f"failures={len(summary.failures)}")
    if summary.ok:
        return EXIT_OK
    report = summary.failures[0]
    actions = report.shrunk if report.shrunk is not None else report.actions
    out = args.out or f"fuzz-failure-seed{args.seed}.txt"
    Path(out).write_text(fuzz.dump_actions(
        actions, f"seed {report.seed}\n{report.failure}"))
    print(f"failure: {report.failure}")
    print(f"{len(actions)}-action reproducer written to {out} "
          f"(replay with: gcprof fuzz --replay {out})")
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcprof", description="Allocation-sampling GC heap: profiles, benchmarks, fuzzing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one workload and write a GPRF profile")
    p.add_argument("workload", choices=sorted(WORKLOADS))
    p.add_argument("--sample-bytes", type=_size, default=32 * 1024,
                   help="sampling period in bytes; 0 disables sampling (default 32k)")
    p.add_argument("--nursery-bytes", type=_size, default=None)
    p.add_argument("--out", default="profile.gprf")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="sweep sampling periods against a baseline")
    p.add_argument("workloads", nargs="*", default=["gcbench_like"],
                   choices=sorted(WORKLOADS), metavar="workload")
    p.add_argument("--periods", type=_sizes, default=list(bench_mod.DEFAULT_PERIODS),
                   help="comma-separated periods, e.g. 32k,4m")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--nursery-bytes", type=_size, default=None)
    p.add_argument("--csv", default=None, help="also write per-run rows as CSV")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convert", help="convert a GPRF profile to Firefox Profiler JSON")
    p.add_argument("profile")
    p.add_argument("out", nargs="?", default=None)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("validate", help="check table references in a converted profile")
    p.add_argument("json")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fuzz", help="randomized differential test of the sampler")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sequences", type=int, default=1000)
    p.add_argument("--actions-per-sequence", type=int, default=200)
    p.add_argument("--shrink", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", default=None, help="where to write a failing sequence")
    p.add_argument("--replay", default=None, help="re-run a dumped action file")
    p.set_defaults(func=cmd_fuzz)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ProfileFormatError as exc:
        print(f"error: invalid profile: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
