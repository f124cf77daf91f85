"""Workload runner with a seeded cooperative scheduler and crash injection.

Workers are greenlets.  Every labeled point of the algorithms is a potential
preemption: the scheduler hook counts points down to the next event, which
is a context switch, a thread crash (the running worker dies at that point)
or a full-system crash (every worker is parked and discarded, the pool
crashes and the monitor reboots from the surviving image).  Runs with equal
seeds are identical, log included.
"""
from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import greenlet

from .. import probe
from ..ds.base import OP_INSERT, OP_REMOVE
from ..pmem import CrashMode, CrashModel, PmemPool
from ..runtime import DEFAULT_PATIENCE
from .log import CRASH, HistoryLog
from .plan import FULL, LABEL, NONE, OP_COUNT, CrashPlan
from .system import System

WORKLOADS = {"pair": None, "enq20": 20, "enq50": 50, "enq80": 80}


class ThreadKilled(BaseException):
    """Raised inside a worker to kill it at a labeled point."""


def make_ops(workload: str, tid: int, n: int, rng: random.Random) -> list[tuple[int, int]]:
    """Root operations for thread ``tid``; inserted values are unique.

    A ``pair`` op is an insert followed by a remove, so it yields ``2n``
    root operations; the mixed workloads yield ``n``.
    """
    if workload not in WORKLOADS:
        raise ValueError(f"unknown workload {workload!r}; choose from {sorted(WORKLOADS)}")
    pct = WORKLOADS[workload]
    if pct is None:
        return [op for seq in range(n) for op in ((OP_INSERT, tid << 32 | seq), (OP_REMOVE, 0))]
    ops = []
    for seq in range(n):
        ins = rng.randrange(100) < pct
        ops.append((OP_INSERT, tid << 32 | seq) if ins else (OP_REMOVE, 0))
    return ops


@dataclass
class RunConfig:
    ds: str = "msq-cas"
    workload: str = "enq50"
    threads: int = 4
    #: root operations per thread
    ops: int = 100
    seed: int = 0
    plan: CrashPlan = field(default_factory=CrashPlan)
    prefill: int = 0
    patience: int = DEFAULT_PATIENCE
    bug: bool = False
    capacity: int = 1 << 23
    nthreads: int = 64
    #: mean number of labeled points between context switches
    switch_mean: int = 8
    path: Optional[str] = None
    #: callables run after each scheduling step, given the runner
    checks: tuple = ()

    def __post_init__(self):
        if not 1 <= self.threads < self.nthreads:
            raise ValueError(f"threads must be in 1..{self.nthreads - 1}")
        if self.ops < 0 or self.prefill < 0:
            raise ValueError("ops and prefill must be non-negative")
        if self.workload not in WORKLOADS:
            raise ValueError(f"unknown workload {self.workload!r}")


@dataclass
class RunResult:
    config: RunConfig
    log: HistoryLog
    system: System
    final: list
    prefilled: list
    boots: int
    thread_crashes: int
    steps: int
    flushes: int
    help_count: int
    seconds: float
    check_failures: list


_YIELD = object()
_CRASH = object()
_DONE = object()
_KILLED = object()
_NEVER = float("inf")


class Runner:
    def __init__(self, cfg: RunConfig, log: Optional[HistoryLog] = None):
        self.cfg = cfg
        self.plan = cfg.plan
        self.rng = random.Random(cfg.seed)
        self.log = log if log is not None else HistoryLog()
        self.ops = {t: make_ops(cfg.workload, t, cfg.ops, random.Random(f"{cfg.seed}/{t}"))
                    for t in range(1, cfg.threads + 1)}
        self.next_op = {t: 0 for t in self.ops}
        self.completed = 0
        self.total = sum(len(v) for v in self.ops.values())
        self.boots = 0
        self.thread_crashes = 0
        self.check_failures: list = []
        self.flushes = 0
        self.help_count = 0
        self.system: Optional[System] = None
        self.workers: dict[int, greenlet.greenlet] = {}
        self.current = 0
        # step accounting for the hook's countdown
        self._base = 0
        self._armed = 1
        self._countdown = 1
        self._next_switch = 0
        self._crash_at = _NEVER
        self._crashes_left = self.plan.crashes
        self._label_hits = 0
        plan = self.plan
        if plan.kind == NONE or plan.trigger == LABEL:
            self._triggers: list = []
        elif plan.trigger == OP_COUNT:
            self._triggers = sorted(plan.at)
        else:
            # leave the last fifth of the run crash-free so every crash fires
            hi = max(self.total * 4 // 5, 2)
            self._triggers = sorted(self.rng.randrange(1, hi) for _ in range(plan.count))

    # ------------------------------------------------------------------ #
    # scheduler hook
    # ------------------------------------------------------------------ #

    def _now(self) -> int:
        return self._base + self._armed - self._countdown

    def _rearm(self, now: int) -> None:
        nxt = min(self._next_switch, self._crash_at)
        delta = max(1, int(nxt - now)) if nxt != _NEVER else 1 << 30
        self._base = now
        self._armed = self._countdown = delta

    def _hook(self, label: str) -> None:
        c = self._countdown - 1
        if c > 0:
            self._countdown = c
            return
        self._countdown = 0
        self._event(label)

    def _label_hook(self, label: str) -> None:
        if label == self.plan.label and self._crashes_left > 0:
            self._label_hits += 1
            if self._label_hits >= self.plan.nth and self._eligible():
                self._label_hits = 0
                self._crash_at = 0
                self._countdown = 1
        self._hook(label)

    def _eligible(self) -> bool:
        return self.plan.tid is None or self.plan.tid == self.current

    def _event(self, label: str) -> None:
        now = self._now()
        if self._crash_at <= now and (self.plan.kind == FULL or self._eligible()):
            self._crash_at = _NEVER
            self._crashes_left -= 1
            self._rearm(now)
            if self.plan.kind == FULL:
                self.main.switch(_CRASH)
                raise AssertionError("a crashed worker was resumed")  # pragma: no cover
            raise ThreadKilled(label)
        if self._next_switch <= now:
            self._next_switch = now + 1 + int(self.rng.expovariate(1 / self.cfg.switch_mean))
            self._rearm(now)
            self.main.switch(_YIELD)
            return
        self._rearm(now)

    def _arm_crash(self) -> None:
        now = self._now()
        delay = 1 if self.plan.trigger == OP_COUNT else self.rng.randrange(1, self.plan.jitter)
        self._crash_at = min(self._crash_at, now + delay)
        self._base = now
        self._armed = self._countdown = max(1, int(min(self._next_switch, self._crash_at) - now))

    def _on_response(self, tid: int, seq: int, op: int, result: int) -> None:
        if seq != self.next_op[tid]:
            return
        self.next_op[tid] = seq + 1
        self.completed += 1
        # one pending crash at a time; later triggers wait for the next response
        while (self._triggers and self._triggers[0] <= self.completed
               and self._crash_at == _NEVER):
            self._triggers.pop(0)
            self._arm_crash()

    # ------------------------------------------------------------------ #
    # workers
    # ------------------------------------------------------------------ #

    def _worker(self, tid: int, recover: bool):
        try:
            system = self.system
            if recover:
                system.resume(tid)
            ops = self.ops[tid]
            while self.next_op[tid] < len(ops):
                i = self.next_op[tid]
                op, arg = ops[i]
                system.execute(tid, op, arg, i)
            return _DONE
        except ThreadKilled:
            return _KILLED

    def _spawn(self, tid: int, recover: bool) -> None:
        self.workers[tid] = greenlet.greenlet(lambda: self._worker(tid, recover), self.main)

    def _attach(self, system: System) -> None:
        self.system = system
        system.on_response = self._on_response

    def run(self) -> RunResult:
        cfg = self.cfg
        t0 = time.perf_counter()
        system = System.create(cfg.ds, cfg.capacity, cfg.nthreads, cfg.path, self.log,
                               cfg.patience, cfg.bug)
        prefilled = [(0xFFFF << 32) | i for i in range(cfg.prefill)]
        system.ds.prefill(prefilled)
        system.pool.flush_all()
        system.pool.stats.reset()
        self._attach(system)
        self.main = greenlet.getcurrent()
        hook = self._label_hook if self.plan.trigger == LABEL and self.plan.kind != NONE else self._hook
        prev = probe.set_hook(hook)
        try:
            for tid in self.ops:
                self._spawn(tid, False)
            self._loop()
        finally:
            probe.set_hook(prev)
        system = self.system
        self.flushes += system.pool.stats.flushes
        self.help_count += system.rt.help_count
        final = system.traverse()
        return RunResult(cfg, self.log, system, final, prefilled, self.boots,
                         self.thread_crashes, self._now(), self.flushes, self.help_count,
                         time.perf_counter() - t0, self.check_failures)

    def _loop(self) -> None:
        rng = self.rng
        checks = self.cfg.checks
        while self.workers:
            tids = sorted(self.workers)
            tid = tids[rng.randrange(len(tids))] if len(tids) > 1 else tids[0]
            g = self.workers[tid]
            self.current = tid
            msg = g.switch()
            if msg is _CRASH:
                self._full_crash()
            elif g.dead:
                del self.workers[tid]
                if msg is _KILLED:
                    self._thread_crash(tid, g)
            for check in checks:
                problems = check(self)
                if problems:
                    self.check_failures.extend(problems)

    def _thread_crash(self, tid: int, g) -> None:
        self.thread_crashes += 1
        self.system.pool.drop_pending(g)
        self.system.thread_crashed(tid)
        self._spawn(tid, True)

    def _full_crash(self) -> None:
        for g in self.workers.values():
            if not g.dead:
                g.throw(greenlet.GreenletExit)
        self.workers.clear()
        old = self.system
        self.flushes += old.pool.stats.flushes
        self.help_count += old.rt.help_count
        model = self.plan.model
        if model.mode is CrashMode.PER_LINE_RANDOM:
            model = CrashModel.per_line_random(self.rng.getrandbits(32))
        self.log.append(0, 0, CRASH, model.mode.value)
        image = old.pool.crash(model)
        if old.pool.path is not None:
            path = old.pool.path
            old.pool.close()
            pool = PmemPool.open(path)
        else:
            pool = PmemPool.from_image(image)
        self.boots += 1
        self.log.new_boot()
        prev = probe.set_hook(None)
        try:
            system = System.boot(pool, self.log, self.cfg.patience, self.cfg.bug)
        finally:
            probe.set_hook(prev)
        self._attach(system)
        for check in self.cfg.checks:
            reset = getattr(check, "on_boot", None)
            if reset is not None:
                reset(self)
        for tid in self.ops:
            self._spawn(tid, True)


def run(cfg: RunConfig, log: Optional[HistoryLog] = None) -> RunResult:
    return Runner(cfg, log).run()


def run_threads(ds: str, workload: str, threads: int, ops: int, seed: int = 0,
                prefill: int = 0, capacity: int = 1 << 23, bug: bool = False) -> RunResult:
    """Crash-free run on real OS threads (stress mode)."""
    cfg = RunConfig(ds=ds, workload=workload, threads=threads, ops=ops, seed=seed,
                    prefill=prefill, capacity=capacity, bug=bug)
    log = HistoryLog()
    system = System.create(ds, capacity, cfg.nthreads, None, log, cfg.patience, bug)
    prefilled = [(0xFFFF << 32) | i for i in range(prefill)]
    system.ds.prefill(prefilled)
    system.pool.flush_all()
    system.pool.stats.reset()
    all_ops = {t: make_ops(workload, t, ops, random.Random(f"{seed}/{t}"))
               for t in range(1, threads + 1)}
    errors: list = []
    lock = threading.Lock()
    log_append = log.append

    def locked_append(*a, **kw):
        with lock:
            return log_append(*a, **kw)

    log.append = locked_append  # type: ignore[method-assign]

    def body(tid: int) -> None:
        try:
            for i, (op, arg) in enumerate(all_ops[tid]):
                system.execute(tid, op, arg, i)
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)

    t0 = time.perf_counter()
    workers = [threading.Thread(target=body, args=(t,)) for t in all_ops]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    seconds = time.perf_counter() - t0
    del log.append
    if errors:
        raise errors[0]
    return RunResult(cfg, log, system, system.traverse(), prefilled, 0, 0, 0,
                     system.pool.stats.flushes, system.rt.help_count, seconds, [])
