"""Seeded campaigns: crash runs checked by the verifiers, in bulk."""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import greenlet

from .. import probe
from ..checkpoint import CheckpointSlots
from ..clock import TS_MASK
from ..dcas import CasLocation, CasMemento
from ..ds.layout import CAS, CKPT
from ..pmem import CrashModel, PmemPool
from ..runtime import DEFAULT_PATIENCE, Runtime
from .log import FREE, RETIRE
from .plan import LABEL, THREAD, CrashPlan
from .runner import RunConfig, RunResult, run
from .system import System
from .verify import (HelpOracle, Op, history_from_log, verify_exactly_once,
                     verify_linearizable, verify_no_double_free)

QUEUES = ("msq-cas", "msq-indel", "msq-vol")

#: thread-crash sites per structure, rotated across seeds
CRASH_LABELS = {
    "msq-cas": ("dcas.L26", "dcas.L35", "dcas.L38", "ckpt.buf", "ckpt.ts",
                "smr.clear.flag", "smr.unpin.handoff"),
    "msq-indel": ("insdel.delete.L34", "insdel.delete.L38", "insdel.load.L10", "ckpt.buf",
                  "ckpt.ts", "smr.clear.sub", "smr.unpin.flush"),
    "msq-vol": ("insdel.delete.L34", "insdel.delete.L37", "ckpt.buf", "ckpt.ts",
                "smr.clear.fenced", "smr.unpin.flush"),
    "stack": ("dcas.L26", "dcas.L35", "ckpt.buf", "ckpt.ts", "smr.clear.flag"),
}


@dataclass
class Outcome:
    seed: int
    ok: bool
    crashes: int
    problems: list = field(default_factory=list)
    seconds: float = 0.0


def check_run(res: RunResult) -> list:
    problems = []
    rep = verify_exactly_once(res.log.events, res.final, res.prefilled)
    problems.extend(rep.problems)
    problems.extend(verify_no_double_free(res.log.events).problems)
    problems.extend(res.system.ds.check_invariants())
    problems.extend(res.check_failures)
    return problems


def full_crash_run(ds: str, seed: int, threads: int = 4, ops: int = 10_000,
                   crashes: int = 5, workload: str = "enq50") -> Outcome:
    """Random full-system crashes under the revert-all-dirty model."""
    plan = CrashPlan.full(crashes, model=CrashModel.revert_all_dirty())
    res = run(RunConfig(ds=ds, workload=workload, threads=threads, ops=ops, seed=seed,
                        plan=plan))
    problems = check_run(res)
    if res.boots < crashes:
        problems.append(f"only {res.boots} of {crashes} crashes fired")
    return Outcome(seed, not problems, res.boots, problems, res.seconds)


def label_plan(ds: str, seed: int, crashes: int, ops_total: int) -> CrashPlan:
    labels = CRASH_LABELS[ds]
    label = labels[seed % len(labels)]
    rng = random.Random(seed)
    # spread the crashes; the rarest labels (delete path) fire about once per
    # two operations, so all crashes must fit in half the run's label hits
    nth = max(1, rng.randrange(ops_total // (8 * crashes) + 1, ops_total // (4 * crashes) + 2))
    return CrashPlan(kind=THREAD, trigger=LABEL, label=label, nth=nth, count=crashes)


def thread_crash_run(ds: str, seed: int, threads: int = 4, ops: int = 10_000,
                     crashes: int = 5, workload: str = "enq50") -> Outcome:
    """Thread crashes with revival at labeled points."""
    plan = label_plan(ds, seed, crashes, threads * ops)
    res = run(RunConfig(ds=ds, workload=workload, threads=threads, ops=ops, seed=seed,
                        plan=plan))
    problems = check_run(res)
    if res.thread_crashes < crashes:
        problems.append(f"only {res.thread_crashes} of {crashes} thread crashes at "
                        f"{plan.label} fired")
    retires = sum(1 for e in res.log.events if e.kind == RETIRE)
    frees = sum(1 for e in res.log.events if e.kind == FREE)
    if frees > retires:
        problems.append(f"{frees} frees for {retires} retirements")
    return Outcome(seed, not problems, res.thread_crashes, problems, res.seconds)


# ---------------------------------------------------------------------- #
# HELP invariant
# ---------------------------------------------------------------------- #


class HelpCheck:
    """A runner check that evaluates the HELP invariant after every step."""

    def __init__(self):
        self.oracle = HelpOracle()

    def __call__(self, runner) -> list:
        if self.oracle.rt is not runner.system.rt:
            self.oracle.bind(runner.system.rt)
        return self.oracle.check()

    def on_boot(self, runner) -> None:
        self.oracle.on_crash()
        self.oracle.bind(runner.system.rt)


def scripted_help_scenarios(rounds: int = 6) -> HelpOracle:
    """Two owners on two locations; odd rounds stall each owner and help it.

    The oracle is checked before and after every help and after every CAS.
    """
    pool = PmemPool.create(1 << 16, nthreads=4)
    rt = Runtime(pool)
    oracle = HelpOracle()
    oracle.bind(rt)
    owners = {1: (CasLocation(rt, pool.heap_start), CasMemento(rt, pool.heap_start + 64)),
              2: (CasLocation(rt, pool.heap_start + 128), CasMemento(rt, pool.heap_start + 192))}
    for loc, _ in owners.values():
        loc.init(0x40)
    stalled: dict = {}

    def hook(label: str) -> None:
        g = stalled.get("g")
        if label == "dcas.L26" and g is not None and greenlet.getcurrent() is g:
            g.parent.switch()

    prev_tracer = probe.set_tracer(oracle)
    prev_hook = probe.set_hook(hook)
    try:
        for r in range(rounds):
            for tid, (loc, mmt) in owners.items():
                old, new = loc.load(), 0x40 * (2 + r * 2 + tid)
                if r % 2 == 0:
                    assert loc.cas(old, new, tid, mmt).ok
                    oracle.check()
                    continue
                g = greenlet.greenlet(lambda: loc.cas(old, new, tid, mmt))
                stalled["g"] = g
                g.switch()
                oracle.check()
                rt.patience = 0
                try:
                    assert loc.load() == new
                finally:
                    rt.patience = DEFAULT_PATIENCE
                oracle.check()
                stalled.pop("g")
                assert g.switch().ok
                oracle.check()
    finally:
        probe.set_tracer(prev_tracer)
        probe.set_hook(prev_hook)
    return oracle


def help_stress_run(seed: int, ds: str = "msq-cas", threads: int = 4, ops: int = 300,
                    crashes: int = 2) -> tuple[Outcome, HelpOracle]:
    check = HelpCheck()
    rng = random.Random(seed)
    plan = CrashPlan.full(crashes) if seed % 2 else CrashPlan.thread(crashes * 2)
    cfg = RunConfig(ds=ds, workload="enq50", threads=threads, ops=ops, seed=seed, plan=plan,
                    patience=rng.choice((0, 1, 3)), switch_mean=2, checks=(check,))
    prev = probe.set_tracer(check.oracle)
    try:
        res = run(cfg)
    finally:
        probe.set_tracer(prev)
    problems = list(check.oracle.violations) + check_run(res)
    return Outcome(seed, not problems, res.boots + res.thread_crashes, problems,
                   res.seconds), check.oracle


# ---------------------------------------------------------------------- #
# linearizability
# ---------------------------------------------------------------------- #


def crash_fragment(seed: int, ds: Optional[str] = None) -> tuple[str, list[Op], tuple]:
    """A short history (at most 8 completed ops, 1-3 threads) from a crash run."""
    rng = random.Random(seed)
    ds = ds or rng.choice(QUEUES + ("stack",))
    threads = rng.randint(1, 3)
    workload = rng.choice(("pair", "enq50", "enq80"))
    # a pair op is two root operations
    ops = max(1, 8 // threads // (2 if workload == "pair" else 1))
    prefill = rng.randint(0, 2)
    plan = rng.choice((CrashPlan.full(rng.randint(1, 2), jitter=40),
                       CrashPlan.thread(rng.randint(1, 3), jitter=40)))
    res = run(RunConfig(ds=ds, workload=workload, threads=threads,
                        ops=ops, seed=seed, plan=plan, prefill=prefill, switch_mean=2,
                        capacity=1 << 18, nthreads=8))
    kind = "stack" if ds == "stack" else "queue"
    return kind, history_from_log(res.log.events), tuple(res.prefilled)


def fifo_violations() -> list[list[Op]]:
    """Ten hand-made queue histories that no FIFO order explains."""
    E = -1
    return [
        # sequential enq 1, enq 2, deq -> 2
        [Op(1, "enq", 1, None, 0, 1), Op(1, "enq", 2, None, 2, 3), Op(1, "deq", None, 2, 4, 5)],
        # a value dequeued before it was enqueued
        [Op(1, "deq", None, 5, 0, 1), Op(2, "enq", 5, None, 2, 3)],
        # the same value dequeued twice
        [Op(1, "enq", 1, None, 0, 1), Op(1, "deq", None, 1, 2, 3), Op(2, "deq", None, 1, 4, 5)],
        # empty while an element is certainly present
        [Op(1, "enq", 1, None, 0, 1), Op(2, "deq", None, E, 2, 3)],
        # a value that was never enqueued
        [Op(1, "enq", 1, None, 0, 1), Op(1, "deq", None, 9, 2, 3)],
        # overtaking across threads
        [Op(1, "enq", 1, None, 0, 1), Op(2, "enq", 2, None, 2, 3), Op(3, "deq", None, 2, 4, 5),
         Op(3, "deq", None, 1, 6, 7)],
        # empty between two dequeues of one queue of two
        [Op(1, "enq", 1, None, 0, 1), Op(1, "enq", 2, None, 2, 3), Op(2, "deq", None, 1, 4, 5),
         Op(2, "deq", None, E, 6, 7), Op(2, "deq", None, 2, 8, 9)],
        # LIFO behaviour with three elements
        [Op(1, "enq", 1, None, 0, 1), Op(1, "enq", 2, None, 2, 3), Op(1, "enq", 3, None, 4, 5),
         Op(2, "deq", None, 3, 6, 7), Op(2, "deq", None, 2, 8, 9)],
        # concurrent enqueues still cannot reorder after a completed dequeue
        [Op(1, "enq", 1, None, 0, 3), Op(2, "enq", 2, None, 1, 2), Op(3, "deq", None, 2, 4, 5),
         Op(3, "deq", None, 2, 6, 7)],
        # prefilled element skipped
        [Op(1, "enq", 4, None, 0, 1), Op(2, "deq", None, 4, 2, 3), Op(2, "deq", None, 7, 4, 5),
         Op(1, "enq", 7, None, 6, 7)],
    ]


def linearizability_campaign(n: int = 1000, seed0: int = 0) -> tuple[int, list]:
    accepted, rejected = 0, []
    for seed in range(seed0, seed0 + n):
        kind, ops, initial = crash_fragment(seed)
        if verify_linearizable(ops, kind, initial):
            accepted += 1
        else:
            rejected.append(seed)
    return accepted, rejected


# ---------------------------------------------------------------------- #
# space, flush economy, calibration
# ---------------------------------------------------------------------- #


def space_footprint(nthreads: int) -> dict:
    """Pool bytes written by detectable CASes on one location with one memento.

    Every thread id CASes the location once; the heap is diffed after each
    CAS so a transient annotation counts too.
    """
    pool = PmemPool.create(1 << 16, nthreads=nthreads)
    rt = Runtime(pool)
    loc = CasLocation(rt, pool.heap_start)
    mmt = CasMemento(rt, pool.heap_start + 64)
    loc.init(0x40)
    start, size = pool.heap_start, pool.capacity - pool.heap_start
    touched: set = set()
    prev = pool.read_bytes(start, size)
    for tid in range(1, nthreads):
        new = tid << 45 | 0x40 * (tid + 1)      # tag bits change too
        assert loc.cas(loc.load(), new, tid, mmt).ok
        cur = pool.read_bytes(start, size)
        touched |= {start + i for i in range(size) if prev[i] != cur[i]}
        prev = cur
    loc_words = {i >> 3 for i in touched if loc.off <= i < loc.off + 64}
    mmt_words = {i >> 3 for i in touched if mmt.off <= i < mmt.off + 64}
    return {
        "location": CasLocation.SIZE,
        "memento": CasMemento.SIZE,
        "location_words": len(loc_words),
        "memento_words": len(mmt_words),
        "other_heap_bytes": sum(1 for i in touched
                                if not (loc.off <= i < loc.off + 64 or mmt.off <= i < mmt.off + 64)),
    }


def flush_counts(seed: int = 7, threads: int = 8, ops: int = 500,
                 structures: Iterable[str] = QUEUES) -> dict:
    """Flush instructions (flush + flush_opt) issued by the pair workload."""
    out = {}
    for ds in structures:
        res = run(RunConfig(ds=ds, workload="pair", threads=threads, ops=ops, seed=seed,
                            prefill=100))
        out[ds] = res.flushes
    return out


def single_line_checkpoint_flushes(calls: int = 10) -> list:
    pool = PmemPool.create(1 << 16, nthreads=4)
    rt = Runtime(pool)
    slots = CheckpointSlots(rt, pool.heap_start, 2)
    assert slots.single_line
    per_call = []
    for i in range(calls):
        before = pool.stats.flushes
        slots.checkpoint((i, i + 1), 1)
        per_call.append(pool.stats.flushes - before)
    return per_call


def scan_timestamps(image: bytes, system: System) -> int:
    """Largest timestamp anywhere in the image: root records and mementos, read raw."""
    word = struct.Struct("<Q")

    def at(off: int) -> int:
        return word.unpack_from(image, off)[0]

    best = 0
    pool = system.pool
    for p in range(2):
        for tid in range(pool.nthreads):
            best = max(best, at(pool.help_offset + 8 * (p * pool.nthreads + tid)) & TS_MASK)
    for tid in range(1, pool.nthreads):
        rec = system.record(tid)
        best = max(best, at(rec.off + 24) & TS_MASK)
        for m in system.mementos(tid).values():
            for f in m.fields:
                sub = m.subs[f.name]
                if f.kind == CAS:
                    best = max(best, at(sub.off) & TS_MASK)
                elif f.kind == CKPT:
                    for slot in range(2):
                        best = max(best, at(sub.off + slot * sub.size() // 2))
    return best


def calibration_campaign(reboots: int = 3, seed: int = 0, ds: str = "msq-cas",
                         ops: int = 200) -> list:
    """Reboot with the raw counter reset; new timestamps must exceed every old one.

    Returns one ``(scanned_max, first_new)`` pair per reboot.
    """
    pairs = []
    res = run(RunConfig(ds=ds, workload="enq50", threads=4, ops=ops, seed=seed))
    system = res.system
    for boot in range(reboots):
        image = system.pool.crash(CrashModel.revert_all_dirty())
        pool = PmemPool.from_image(image)
        system = System.boot(pool)
        scanned = scan_timestamps(image, system)
        first = system.rt.clock.now()
        pairs.append((scanned, first))
        for i in range(ops):
            system.execute(1 + i % 3, 1 + i % 2, (boot + 1) << 40 | i, 1_000_000 * (boot + 1) + i)
    return pairs
