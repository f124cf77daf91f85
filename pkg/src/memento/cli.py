"""Command-line front end: ``mmtk bench`` and ``mmtk crashtest``.

Exit codes: 0 when every check passes, 1 on a verification failure, 2 on a
usage error.  ``MMTK_POOL`` names a file to back the pool instead of DRAM.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import probe
from .ds.base import OP_INSERT, OP_REMOVE
from .harness import campaign, scenarios
from .harness.plan import CrashPlan, PlanError
from .harness.runner import WORKLOADS, RunConfig, run, run_threads
from .harness.system import STRUCTURES

CSV_COLUMNS = ("ds", "workload", "threads", "ops", "throughput", "flush_count", "help_count")
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MAX_THREADS = 63


class UsageError(Exception):
    pass


def _choices(text: str, allowed, what: str) -> list[str]:
    items = [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in items if x not in allowed]
    if bad or not items:
        raise UsageError(f"unknown {what} {', '.join(bad) or repr(text)}; "
                         f"choose from {', '.join(sorted(allowed))}")
    return items


def _counts(text: str, what: str, lo: int = 0, hi: Optional[int] = None) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what} must be integers, got {text!r}") from None
    if not values or any(v < lo or (hi is not None and v > hi) for v in values):
        raise UsageError(f"{what} out of range: {text!r}")
    return values


def capacity_for(items: int) -> int:
    """A power-of-two pool large enough for ``items`` live nodes plus slack."""
    need = 64 * 2 * items + (4 << 20)
    return 1 << max(20, (need - 1).bit_length())


def _plan(path: Optional[str]) -> CrashPlan:
    if path is None:
        return CrashPlan()
    try:
        return CrashPlan.load(path)
    except OSError as exc:
        raise UsageError(f"cannot read crash plan: {exc}") from None
    except PlanError as exc:
        raise UsageError(f"bad crash plan {path}: {exc}") from None


def _pool_path() -> Optional[str]:
    return os.environ.get("MMTK_POOL") or None


# ---------------------------------------------------------------------- #
# bench
# ---------------------------------------------------------------------- #


def cmd_bench(args) -> int:
    structures = _choices(args.ds, STRUCTURES, "structure")
    workloads = _choices(args.workload, WORKLOADS, "workload")
    threads = _counts(args.threads, "threads", 1, MAX_THREADS)
    if args.ops < 1 or args.prefill < 0:
        raise UsageError("--ops must be positive and --prefill non-negative")
    plan = _plan(args.crash_plan)
    if args.mode == "threads" and plan.crashes:
        raise UsageError("crash plans need the scripted scheduler (--mode scripted)")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(CSV_COLUMNS)
        for ds, workload, n in itertools.product(structures, workloads, threads):
            capacity = capacity_for(args.prefill + 2 * n * args.ops)
            if args.mode == "threads":
                res = run_threads(ds, workload, n, args.ops, args.seed, args.prefill, capacity,
                                  args.bug_switch)
            else:
                res = run(RunConfig(ds=ds, workload=workload, threads=n, ops=args.ops,
                                    seed=args.seed, plan=plan, prefill=args.prefill,
                                    bug=args.bug_switch, capacity=capacity,
                                    path=_pool_path()))
            # root operations: a pair op is one insert plus one remove
            total = n * args.ops * (2 if workload == "pair" else 1)
            throughput = total / res.seconds if res.seconds > 0 else float("inf")
            writer.writerow((ds, workload, n, total, f"{throughput:.1f}", res.flushes,
                             res.help_count))
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------------- #
# crashtest
# ---------------------------------------------------------------------- #


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_crashtest(args) -> int:
    structures = _choices(args.ds, STRUCTURES, "structure")
    workload = _choices(args.workload, WORKLOADS, "workload")[0]
    threads = _counts(args.threads, "threads", 1, MAX_THREADS)[0]
    if args.ops < 1 or args.seeds < 1:
        raise UsageError("--ops and --seeds must be positive")
    plan = _plan(args.crash_plan) if args.crash_plan else CrashPlan.full(5)
    dump = Path(args.out or "mmtk-violation")
    failures = 0
    probe.reset_coverage()

    for ds in structures:
        bad = 0
        for seed in range(args.seed, args.seed + args.seeds):
            res = run(RunConfig(ds=ds, workload=workload, threads=threads, ops=args.ops,
                                seed=seed, plan=plan, prefill=args.prefill,
                                bug=args.bug_switch, capacity=capacity_for(
                                    args.prefill + 2 * threads * args.ops),
                                path=_pool_path()))
            problems = campaign.check_run(res)
            if problems:
                bad += 1
                log_path = dump.parent / f"{dump.name}.{ds}.{seed}.log"
                res.log.save(log_path)
                _say(f"FAIL run {ds} seed={seed}: {problems[0]} (history in {log_path})")
        failures += bad
        _say(f"{'ok  ' if not bad else 'FAIL'} runs {ds}: {args.seeds - bad}/{args.seeds} seeds "
             f"passed, {plan.crashes} {plan.kind} crashes each")

    # exhaustive windows around one dequeue and one enqueue on every structure
    for ds in structures:
        script = [(1, OP_REMOVE, 0), (2, OP_INSERT, 9), (1, OP_REMOVE, 0)]
        reports = [("ops", scenarios.structure_window(ds, script, prefill=(1, 2),
                                                      bug=args.bug_switch))]
        if ds in ("msq-indel", "msq-vol"):
            reports.append(("unpin", scenarios.unpin_window(ds, bug=args.bug_switch)))
        for name, rep in reports:
            if rep.ok:
                _say(f"ok   window {ds}/{name}: {rep.images} images")
                continue
            failures += 1
            image = rep.first_bad_image()
            img_path = dump.parent / f"{dump.name}.{ds}.{name}.img"
            if image is not None:
                img_path.write_bytes(image)
            _say(f"FAIL window {ds}/{name}: {len(rep.problems)} problems, e.g. "
                 f"{rep.problems[0]}; violating image in {img_path}")

    if not args.skip_windows:
        for name, rep in scenarios.criterion_windows().items():
            failures += not rep.ok
            _say(f"{'ok  ' if rep.ok else 'FAIL'} window {name}: {rep.images} images")
            for p in rep.problems[:3]:
                _say(f"     {p}")

    _say("coverage of labeled recovery states:")
    for state in scenarios.RECOVERY_STATES:
        _say(f"  {state:28s} {probe.coverage[state]}")
    missing = scenarios.coverage_missing()
    if missing and not args.skip_windows:
        failures += 1
        _say(f"FAIL coverage: never reached {', '.join(missing)}")
    _say("PASS" if not failures else f"FAIL ({failures} failing checks)")
    return EXIT_OK if not failures else EXIT_FAIL


# ---------------------------------------------------------------------- #
# entry point
# ---------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmtk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ops: int, prefill: int) -> None:
        p.add_argument("--ds", default="msq-cas",
                       help=f"structure(s), comma separated: {', '.join(STRUCTURES)}")
        p.add_argument("--workload", default="pair",
                       help=f"workload(s), comma separated: {', '.join(WORKLOADS)}")
        p.add_argument("--threads", default="1", help="thread count(s), comma separated")
        p.add_argument("--ops", type=int, default=ops, help="root operations per thread")
        p.add_argument("--prefill", type=int, default=prefill, help="items enqueued up front")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--crash-plan", help="key=value crash plan file")
        p.add_argument("--out", help="output path")
        p.add_argument("--bug-switch", action="store_true",
                       help="omit the deferred flush on the delete path (test only)")

    bench = sub.add_parser("bench", help="run workloads and emit one CSV row per cell")
    common(bench, 10_000, 100_000)
    bench.add_argument("--mode", choices=("scripted", "threads"), default="scripted",
                       help="seeded greenlet scheduler or real OS threads")
    bench.set_defaults(func=cmd_bench)

    crash = sub.add_parser("crashtest", help="crash campaigns, windows and coverage")
    common(crash, 500, 0)
    crash.add_argument("--seeds", type=int, default=10, help="seeds per structure")
    crash.add_argument("--skip-windows", action="store_true",
                       help="skip the module-level crash windows and the coverage gate")
    crash.set_defaults(func=cmd_crashtest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmtk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmtk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
