"""The monitor: owns a pool, its structure and the root mementos.

Pool objects created here::

    root table   [magic][structure code][structure root][memento block per tid ...]
    memento block per tid: one line-aligned memento per root operation kind

Boot order after a crash:

1. open the pool and rebuild the allocator's free lists;
2. finish every root-memento clear that was interrupted;
3. calibrate the clock against every persisted timestamp;
4. initialise ``OWN`` for every thread;
5. re-open the critical section of every thread with an operation in flight;
6. let the structure repair its own volatile or lagging state.

Workers then resume in-flight operations in recovery mode.
"""
from __future__ import annotations

from typing import Callable, Optional

from ..clock import Clock, calibrate
from ..ds.base import EMPTY, OpContext, Structure
from ..ds.layout import Memento, layout_size
from ..ds.queue import MsqCas, MsqIndel, MsqVol
from ..ds.stack import TreiberStack
from ..pmem import (DEFAULT_THREADS, LINE, PmemAllocator, PmemPool, UnrecoverablePoolError)
from ..runtime import DEFAULT_PATIENCE, Runtime
from ..smr import Reclaimer, RootRecord
from .log import FREE, INV, RES, RETIRE, THREAD_CRASH, HistoryLog, fmt_result

STRUCTURES: dict[str, type] = {cls.NAME: cls for cls in (MsqCas, MsqIndel, MsqVol, TreiberStack)}
CODES = {name: i + 1 for i, name in enumerate(STRUCTURES)}
ROOT_MAGIC = int.from_bytes(b"MMTKROOT", "little")


class System:
    def __init__(self, pool: PmemPool, rt: Runtime, alloc: PmemAllocator, ds: Structure,
                 table: int, log: Optional[HistoryLog] = None, trace_frees: bool = True):
        self.pool = pool
        self.rt = rt
        self.alloc = alloc
        self.ds = ds
        self.table = table
        self.log = log if log is not None else HistoryLog()
        self.reclaimer = Reclaimer(pool, alloc, on_event=self._on_reclaim if trace_frees else None)
        if trace_frees:
            alloc.on_free = lambda h: self.log.append(0, 0, FREE, "", h)
        self.on_response: Optional[Callable[[int, int, int, int], None]] = None
        self._records: dict[int, RootRecord] = {}
        self._mementos: dict[int, dict[int, Memento]] = {}

    # ------------------------------------------------------------------ #
    # construction
    # ------------------------------------------------------------------ #

    @classmethod
    def create(cls, ds: str, capacity: int = 1 << 23, nthreads: int = DEFAULT_THREADS,
               path=None, log: Optional[HistoryLog] = None, patience: int = DEFAULT_PATIENCE,
               bug: bool = False) -> "System":
        if ds not in STRUCTURES:
            raise ValueError(f"unknown structure {ds!r}; choose from {sorted(STRUCTURES)}")
        pool = PmemPool.create(capacity, path, nthreads)
        rt = Runtime(pool, patience=patience, omit_delete_flush=bug)
        alloc = PmemAllocator(pool)
        ds_cls = STRUCTURES[ds]
        structure = ds_cls.create(rt, alloc)
        p = pool.nthreads
        table = alloc.alloc(8 * (3 + p))
        pool.store_word(table, ROOT_MAGIC)
        pool.store_word(table + 8, CODES[ds])
        pool.store_word(table + 16, structure.root)
        msize = LINE - 8 + sum(layout_size(f) for f in ds_cls.MEMENTOS.values())
        for tid in range(1, p):
            block = alloc.alloc(msize)
            alloc.publish(block)
            pool.store_word(table + 8 * (2 + tid), block)
        alloc.publish(table)
        pool.set_root(table)
        pool.flush_all()
        return cls(pool, rt, alloc, structure, table, log)

    @classmethod
    def boot(cls, pool: PmemPool, log: Optional[HistoryLog] = None,
             patience: int = DEFAULT_PATIENCE, bug: bool = False, recover: bool = True,
             trace_frees: bool = True) -> "System":
        """Attach to a pool after a crash; with ``recover`` run the monitor's boot steps."""
        rt = Runtime(pool, Clock(), patience=patience, omit_delete_flush=bug)
        alloc = PmemAllocator(pool)
        table = pool.root_offset
        if not table or pool.load_word(table) != ROOT_MAGIC:
            raise UnrecoverablePoolError("pool has no root table")
        code = pool.load_word(table + 8)
        names = {v: k for k, v in CODES.items()}
        if code not in names:
            raise UnrecoverablePoolError(f"unknown structure code {code}")
        ds = STRUCTURES[names[code]](rt, alloc, pool.load_word(table + 16))
        system = cls(pool, rt, alloc, ds, table, log, trace_frees)
        if recover:
            system._recover()
        return system

    def _recover(self) -> None:
        tids = range(1, self.pool.nthreads)
        for tid in tids:
            rec = self.record(tid)
            if rec.clearing:
                rec.finish_clear([self.memento(tid, rec.kind)])
        stamps = []
        for tid in tids:
            stamps.append(self.record(tid).own_floor)
            for m in self.mementos(tid).values():
                stamps.extend(m.timestamps())
        calibrate(self.rt.clock, self.pool, stamps)
        arrays = self.rt.arrays
        for tid in tids:
            words = [self.record(tid).own_floor]
            for m in self.mementos(tid).values():
                words.extend(m.cas_words())
            arrays.init_own(tid, words)
        for tid in tids:
            if self.record(tid).active:
                self.reclaimer.pin(tid)
        self.ds.boot_recover()

    # ------------------------------------------------------------------ #
    # per-thread state
    # ------------------------------------------------------------------ #

    def record(self, tid: int) -> RootRecord:
        rec = self._records.get(tid)
        if rec is None:
            rec = self._records[tid] = RootRecord(self.rt, tid)
        return rec

    def mementos(self, tid: int) -> dict[int, Memento]:
        ms = self._mementos.get(tid)
        if ms is None:
            self.rt.arrays.check_tid(tid)
            base = self.pool.load_word(self.table + 8 * (2 + tid)) + LINE - 8
            ms = {}
            for op, fields in self.ds.MEMENTOS.items():
                ms[op] = Memento(self.rt, base, fields)
                base += ms[op].size
            self._mementos[tid] = ms
        return ms

    def memento(self, tid: int, op: int) -> Memento:
        return self.mementos(tid)[op]

    def active_tids(self) -> list[int]:
        return [t for t in range(1, self.pool.nthreads) if self.record(t).active]

    # ------------------------------------------------------------------ #
    # root operations
    # ------------------------------------------------------------------ #

    def execute(self, tid: int, op: int, arg: int, seq: int) -> int:
        """Run a fresh root operation in normal mode."""
        rec = self.record(tid)
        cs = self.reclaimer.pin(tid)
        rec.begin(op, seq, arg)
        self.log.append(seq, tid, INV, self.ds.OP_NAMES[op], self._fmt_arg(op, arg))
        return self._run(tid, rec, op, arg, seq, cs, False)

    def resume(self, tid: int) -> Optional[int]:
        """Finish whatever a crashed execution of ``tid`` left behind.

        Returns the result of a recovered operation, or None when none was in
        flight.
        """
        rec = self.record(tid)
        if rec.clearing:
            rec.finish_clear([self.memento(tid, rec.kind)])
        if rec.active:
            cs = self.reclaimer.revive(tid)
            return self._run(tid, rec, rec.kind, rec.arg, rec.seq, cs, True)
        if self.reclaimer.has_section(tid):
            self.reclaimer.unpin(self.reclaimer.revive(tid))
        return None

    def _run(self, tid, rec, op, arg, seq, cs, recovering) -> int:
        ctx = OpContext(tid, self.memento(tid, op), recovering, cs, self.reclaimer)
        result = self.ds.run(ctx, op, arg)
        self.log.append(seq, tid, RES, self.ds.OP_NAMES[op], self._fmt_arg(op, arg),
                        self._fmt_result(op, result))
        if self.on_response is not None:
            self.on_response(tid, seq, op, result)
        rec.clear([ctx.memento])
        self.reclaimer.unpin(cs)
        return result

    def thread_crashed(self, tid: int) -> None:
        """A worker died: its DRAM-only per-thread state is gone."""
        self.rt.arrays.reset_local(tid)
        self.log.append(0, tid, THREAD_CRASH)

    def _fmt_arg(self, op: int, arg: int) -> str:
        return str(arg) if op == 1 else ""

    def _fmt_result(self, op: int, result: int) -> str:
        return "ok" if op == 1 else fmt_result(result, EMPTY)

    def _on_reclaim(self, kind: str, tid: int, block: int) -> None:
        if kind == "retire":
            self.log.append(0, tid, RETIRE, "", block)

    def traverse(self) -> list[int]:
        return self.ds.traverse()
