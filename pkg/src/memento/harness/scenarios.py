"""Scripted crash-window scenarios for the primitives and the structures.

Each scenario runs a short script once, crashes it under the enumerate model
at every point of its window, and checks the recovered state against the
postcondition of the operation (or, for structure scripts, against a
crash-free run of the same script).
"""
from __future__ import annotations

from typing import Callable, Optional

import greenlet

from .. import probe
from ..checkpoint import CheckpointSlots
from ..clock import calibrate
from ..dcas import CasLocation, CasMemento, ptr
from ..ds.base import OP_REMOVE, REPL
from ..insdel import InsDelLocation
from ..pmem import LINE, PmemPool
from ..runtime import DEFAULT_PATIENCE, Runtime
from .system import System
from .verify import uaf_sweep
from .window import WindowReport, enumerate_crash_window

#: labeled recovery states of the detectable CAS and of delete
RECOVERY_STATES = (
    "dcas.rec.case1",
    "dcas.rec.case2",
    "dcas.rec.case3.L22",
    "dcas.rec.case3.L24",
    "dcas.rec.case4.L19",
    "dcas.rec.case4.L20",
    "insdel.delete.rec.case1",
    "insdel.delete.rec.case2",
)

TID = 1
A, B, C = ptr(0x10000), ptr(0x20000), ptr(0x30000)


class _Scratch:
    """A small pool whose words each sit on their own cacheline."""

    def __init__(self, nthreads: int = 8, capacity: int = 1 << 16):
        self.pool = PmemPool.create(capacity, nthreads=nthreads)
        self.rt = Runtime(self.pool)
        self.base = self.pool.heap_start

    def word(self, i: int) -> int:
        return self.base + LINE * i


def _reboot(image: bytes, cas_mementos=(), stamps=()) -> Runtime:
    pool = PmemPool.from_image(image)
    rt = Runtime(pool)
    words = [pool.load_word(m) for m in cas_mementos]
    calibrate(rt.clock, pool, words + [pool.load_word(s) for s in stamps])
    rt.arrays.init_own(TID, words)
    return rt


# ---------------------------------------------------------------------- #
# detectable CAS
# ---------------------------------------------------------------------- #


def dcas_pair_window(label_from: str, label_to: str) -> WindowReport:
    """Two consecutive CASes by one thread, as a composite operation issues them."""
    s = _Scratch()
    l1, l2, m1, m2 = s.word(0), s.word(1), s.word(2), s.word(3)
    CasLocation(s.rt, l1).init(A)
    CasLocation(s.rt, l2).init(A)
    s.pool.flush_all()

    def script():
        assert CasLocation(s.rt, l1).cas(A, B, TID, CasMemento(s.rt, m1)).ok
        assert CasLocation(s.rt, l2).cas(A, C, TID, CasMemento(s.rt, m2)).ok

    def check(image: bytes, label: str) -> list:
        rt = _reboot(image, (m1, m2))
        out = []
        for attempt in range(2):
            rt.arrays.reset_local(TID)
            r1 = CasLocation(rt, l1).cas(A, B, TID, CasMemento(rt, m1), recovery=True)
            r2 = CasLocation(rt, l2).cas(A, C, TID, CasMemento(rt, m2), recovery=True)
            if not (r1.ok and r2.ok):
                out.append(f"recovery {attempt} did not report success: {r1}, {r2}")
        for loc, want in ((l1, B), (l2, C)):
            got = rt.pool.load_word(loc)
            if got != want:
                out.append(f"location {loc:#x} holds {got:#x}, expected {want:#x}")
        return out

    return enumerate_crash_window(label_from, label_to, script, lambda: s.pool, check)


def dcas_fail_window() -> WindowReport:
    s = _Scratch()
    l1, m1 = s.word(0), s.word(1)
    CasLocation(s.rt, l1).init(A)
    s.pool.flush_all()

    def script():
        assert not CasLocation(s.rt, l1).cas(B, C, TID, CasMemento(s.rt, m1)).ok

    def check(image: bytes, label: str) -> list:
        rt = _reboot(image, (m1,))
        r = CasLocation(rt, l1).cas(B, C, TID, CasMemento(rt, m1), recovery=True)
        out = []
        if r.ok or r.current != A:
            out.append(f"failed CAS recovered as {r}")
        if rt.pool.load_word(l1) != A:
            out.append("failed CAS modified the location")
        return out

    return enumerate_crash_window(None, "dcas.L31", script, lambda: s.pool, check)


def dcas_helped_window() -> WindowReport:
    """The owner stalls after its first CAS and a reader helps it."""
    s = _Scratch()
    l1, m1 = s.word(0), s.word(1)
    CasLocation(s.rt, l1).init(A)
    s.pool.flush_all()
    owner: dict = {}

    def inner(label: str) -> None:
        g = owner.get("g")
        if g is not None and greenlet.getcurrent() is g and label == "dcas.L26":
            g.parent.switch()

    def script():
        g = greenlet.greenlet(lambda: CasLocation(s.rt, l1).cas(A, B, TID, CasMemento(s.rt, m1)))
        owner["g"] = g
        g.switch()
        s.rt.patience = 0
        try:
            seen = CasLocation(s.rt, l1).load()
        finally:
            s.rt.patience = DEFAULT_PATIENCE
        assert seen == B
        assert g.switch().ok

    def check(image: bytes, label: str) -> list:
        rt = _reboot(image, (m1,))
        r = CasLocation(rt, l1).cas(A, B, TID, CasMemento(rt, m1), recovery=True)
        out = []
        if not r.ok:
            out.append(f"helped CAS recovered as failure: {r}")
        if rt.pool.load_word(l1) != B:
            out.append(f"location holds {rt.pool.load_word(l1):#x}")
        return out

    return enumerate_crash_window("dcas.L26", "dcas.L38", script, lambda: s.pool, check, inner)


# ---------------------------------------------------------------------- #
# insert / delete
# ---------------------------------------------------------------------- #


class _Section:
    def __init__(self):
        self.retired: list = []
        self.deferred: set = set()

    def retire(self, block: int) -> None:
        self.retired.append(block)

    def defer_flush(self, off: int) -> None:
        self.deferred.add(off >> 6)


class _Chain:
    """``contains`` over a chain of blocks hanging off one location."""

    def __init__(self, pool, loc):
        self.pool, self.loc = pool, loc

    def contains(self, block: int) -> bool:
        node = self.pool.load_word(self.loc) & ((1 << 45) - 1)
        return node == block


def insdel_delete_window(label_from: Optional[str] = "insdel.delete.L34",
                         label_to: Optional[str] = "insdel.delete.L38",
                         rival: bool = False) -> WindowReport:
    """One thread deletes ``b1`` from a location; optionally a rival wins first."""
    s = _Scratch()
    loc, b1, b2, b3 = s.word(0), s.word(2), s.word(4), s.word(6)
    InsDelLocation(s.rt, loc, REPL).init(b1)
    s.pool.flush_all()

    def script():
        if rival:
            assert InsDelLocation(s.rt, loc, REPL).delete(b1, b3, 2, cs=_Section()).ok
        InsDelLocation(s.rt, loc, REPL).delete(b1, b2, TID, cs=_Section())

    def settle(where, new, tid, cs):
        """Recover one delete and, if its commit was lost, retry it."""
        r = where.delete(b1, new, tid, recovery=True, cs=cs)
        if not r.ok and where.rt.pool.load_word(b1 + REPL) == 0:
            r = where.delete(b1, new, tid, cs=cs)
        return r

    def check(image: bytes, label: str) -> list:
        rt = _reboot(image)
        where = InsDelLocation(rt, loc, REPL)
        out = []
        if rival:
            r2 = settle(where, b3, 2, _Section())
            if not r2.ok:
                out.append("the rival's delete did not complete")
        r = settle(where, b2, TID, _Section())
        winner = rt.pool.load_word(b1 + REPL) >> 55
        if r.ok != (winner == TID):
            out.append(f"delete reported {r.ok} but repl belongs to tid {winner}")
        if rival and r.ok:
            out.append("both deletes of one block succeeded")
        if not rival and not r.ok:
            out.append("uncontended delete failed after recovery and retry")
        final = where.load()
        expect = b3 if rival else b2
        if final != expect:
            out.append(f"location holds {final:#x}, expected {expect:#x}")
        return out

    return enumerate_crash_window(label_from, label_to, script, lambda: s.pool, check)


def insdel_insert_window() -> WindowReport:
    s = _Scratch()
    loc, b1 = s.word(0), s.word(2)
    s.pool.flush_all()

    def script():
        assert InsDelLocation(s.rt, loc, REPL).insert(b1, _Chain(s.pool, loc)).ok

    def check(image: bytes, label: str) -> list:
        rt = _reboot(image)
        where = InsDelLocation(rt, loc, REPL)
        r = where.insert(b1, _Chain(rt.pool, loc), recovery=True)
        out = []
        if not r.ok:
            if not r.spurious:
                out.append("recovery of an uncontended insert failed for real")
            r = where.insert(b1, _Chain(rt.pool, loc))
            if not r.ok:
                out.append("normal retry after a spurious failure failed")
        if where.load() != b1:
            out.append(f"location holds {where.load():#x}")
        return out

    return enumerate_crash_window(None, None, script, lambda: s.pool, check)


# ---------------------------------------------------------------------- #
# checkpoint
# ---------------------------------------------------------------------- #


def checkpoint_window(nwords: int = 8) -> WindowReport:
    s = _Scratch()
    off = s.word(0)
    v1 = tuple(range(1, nwords + 1)) if nwords > 1 else 11
    v2 = tuple(100 + i for i in range(nwords)) if nwords > 1 else 22
    fresh = tuple(7 for _ in range(nwords)) if nwords > 1 else 7
    s.pool.flush_all()
    done = {"first": False}

    def script():
        CheckpointSlots(s.rt, off, nwords).checkpoint(v1, TID)
        done["first"] = True
        CheckpointSlots(s.rt, off, nwords).checkpoint(v2, TID)

    def check(image: bytes, label: str) -> list:
        pool = PmemPool.from_image(image)
        rt = Runtime(pool)
        slots = CheckpointSlots(rt, off, nwords)
        calibrate(rt.clock, pool, [slots.max_timestamp()])
        got = slots.checkpoint(fresh, TID)
        out = []
        if got.detected and got.value not in (v1, v2):
            out.append(f"torn checkpoint recovered: {got.value}")
        if done["first"] and (not got.detected or got.value not in (v1, v2)):
            out.append("a completed checkpoint was lost")
        if not got.detected and got.value != fresh:
            out.append("a fresh checkpoint did not store its value")
        return out

    return enumerate_crash_window("ckpt.buf", "ckpt.done", script, lambda: s.pool, check)


# ---------------------------------------------------------------------- #
# structures
# ---------------------------------------------------------------------- #


def _fresh_system(ds: str, prefill, bug: bool, capacity: int, nthreads: int) -> System:
    prev = probe.set_hook(None)
    try:
        system = System.create(ds, capacity, nthreads, bug=bug)
        system.ds.prefill(list(prefill))
        system.pool.flush_all()
    finally:
        probe.set_hook(prev)
    return system


def sequential_oracle(ds: str, ops, prefill=(), capacity: int = 1 << 18,
                      nthreads: int = 8) -> tuple[list, list]:
    """Results and final contents of a crash-free run of ``ops``."""
    prev = probe.set_hook(None)
    try:
        system = _fresh_system(ds, prefill, False, capacity, nthreads)
        results = [system.execute(tid, op, arg, i) for i, (tid, op, arg) in enumerate(ops)]
        return results, system.traverse()
    finally:
        probe.set_hook(prev)


def structure_window(ds: str, ops, prefill=(), label_from: Optional[str] = None,
                     label_to: Optional[str] = None, bug: bool = False, drain: bool = False,
                     capacity: int = 1 << 18, nthreads: int = 8) -> WindowReport:
    """Crash a sequential script of root operations at every point of a window.

    Every image must pass the use-after-free sweep as is, then recover, run
    the rest of the script, and match the crash-free run exactly.
    ``ops`` holds ``(tid, op, arg)`` triples; ``drain`` frees all retired
    blocks after the script so reclamation is inside the window too.
    """
    want_results, want_final = sequential_oracle(ds, ops, prefill, capacity, nthreads)
    system = _fresh_system(ds, prefill, bug, capacity, nthreads)
    results: dict = {}
    system.on_response = lambda tid, seq, op, r: results.setdefault(seq, r)

    def script():
        for i, (tid, op, arg) in enumerate(ops):
            system.execute(tid, op, arg, i)
        if drain:
            system.reclaimer.drain()

    def check(image: bytes, label: str) -> list:
        raw = System.boot(PmemPool.from_image(image), recover=False, trace_frees=False)
        out = [f"before recovery: {p}" for p in uaf_sweep(raw)]
        if out:
            return out
        s2 = System.boot(PmemPool.from_image(image), bug=bug, trace_frees=False)
        got = dict(results)
        for tid in s2.active_tids():
            seq = s2.record(tid).seq
            r = s2.resume(tid)
            if seq in got and got[seq] != r:
                out.append(f"op {seq} returned {got[seq]} before the crash and {r} after")
            got.setdefault(seq, r)
        for j, (tid, op, arg) in enumerate(ops):
            if j not in got:
                got[j] = s2.execute(tid, op, arg, j)
        s2.reclaimer.drain()
        res = [got[j] for j in range(len(ops))]
        if res != want_results:
            out.append(f"results {res} differ from crash-free {want_results}")
        final = s2.traverse()
        if final != want_final:
            out.append(f"contents {final} differ from crash-free {want_final}")
        out.extend(f"after recovery: {p}" for p in uaf_sweep(s2))
        return out

    return enumerate_crash_window(label_from, label_to, script, lambda: system.pool, check)


def unpin_window(ds: str = "msq-indel", bug: bool = False) -> WindowReport:
    """Dequeue, end the section and reclaim: the deferred-flush window."""
    return structure_window(ds, [(TID, OP_REMOVE, 0)], prefill=(1, 2),
                            label_from="smr.unpin.begin", label_to="smr.drain.done",
                            bug=bug, drain=True)


def criterion_windows() -> dict[str, WindowReport]:
    """The five windows of the exhaustive verification suite."""
    return {
        "dcas first CAS to memento": dcas_pair_window("dcas.L26", "dcas.L35")
        .extend(dcas_helped_window()).extend(dcas_fail_window()),
        "dcas memento to second CAS": dcas_pair_window("dcas.L35", "dcas.L38"),
        "insdel repl CAS to location CAS": insdel_delete_window()
        .extend(insdel_delete_window(rival=True)),
        "checkpoint buffer to timestamp": checkpoint_window(8).extend(checkpoint_window(1)),
        "smr unpin batch flush": unpin_window("msq-indel").extend(unpin_window("msq-vol")),
    }


def coverage_missing(states=RECOVERY_STATES) -> list:
    return [s for s in states if probe.coverage[s] == 0]


ScriptOps = list
Check = Callable[[bytes, str], list]
__all__ = [
    "RECOVERY_STATES", "dcas_pair_window", "dcas_fail_window", "dcas_helped_window",
    "insdel_delete_window", "insdel_insert_window", "checkpoint_window",
    "structure_window", "unpin_window", "sequential_oracle", "criterion_windows",
    "coverage_missing",
]
