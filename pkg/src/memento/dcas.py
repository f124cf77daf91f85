"""Atomic pointer location with detectable compare-and-swap.

A location is exactly one pool word and a CAS memento exactly one pool word,
independent of the thread count.  Word layouts (bit 63 first)::

    location  parity:1 | tid:9 | tag:9 | offset:45      tid 0 = stable value
    memento   parity:1 | fail:1 | ts:62                 ts 0 = unused

A CAS installs ``new`` annotated with the caller's tid and a toggled parity,
persists it, stamps the memento, then strips the annotation.  Readers that
meet an annotated value help strip it and record the help in
``HELP[parity][tid]`` so that a recovering owner can tell whether its first
plain CAS ever took effect.
"""
from __future__ import annotations

from typing import NamedTuple

from . import probe
from .clock import FAIL_BIT, TS_MASK, encode_ts
from .pmem import OFFSET_MASK, PoolUsageError
from .runtime import Runtime

TID_BITS = 9
TAG_BITS = 9
TID_SHIFT = 54
TAG_SHIFT = 45
TID_MASK = (1 << TID_BITS) - 1
TAG_MASK = (1 << TAG_BITS) - 1
STABLE_MASK = (1 << TID_SHIFT) - 1
PARITY_SHIFT = 63
MAX_TID = TID_MASK


def encode(parity: int, tid: int, tag: int, offset: int) -> int:
    if not (0 <= parity <= 1 and 0 <= tid <= TID_MASK and 0 <= tag <= TAG_MASK
            and 0 <= offset <= OFFSET_MASK):
        raise ValueError(f"field out of range: {(parity, tid, tag, offset)}")
    return parity << PARITY_SHIFT | tid << TID_SHIFT | tag << TAG_SHIFT | offset


def decode(word: int) -> tuple[int, int, int, int]:
    """Return ``(parity, tid, tag, offset)``."""
    return (word >> PARITY_SHIFT, (word >> TID_SHIFT) & TID_MASK,
            (word >> TAG_SHIFT) & TAG_MASK, word & OFFSET_MASK)


def ptr(offset: int, tag: int = 0) -> int:
    """A stable pointer value (even parity, tid 0)."""
    return encode(0, 0, tag, offset)


class CasResult(NamedTuple):
    ok: bool
    #: the stable current value when ``ok`` is False
    current: int = 0


class CasMemento:
    """One-word checkpoint of a detectable CAS."""

    __slots__ = ("rt", "off")
    SIZE = 8

    def __init__(self, rt: Runtime, off: int):
        if off & 7:
            raise PoolUsageError(f"CAS memento at {off:#x} is not aligned")
        self.rt = rt
        self.off = off

    def load(self) -> int:
        return self.rt.pool.load_word(self.off)

    def max_timestamp(self) -> int:
        return self.load() & TS_MASK

    def clear(self, flush: bool = True) -> None:
        pool = self.rt.pool
        pool.store_word(self.off, encode_ts(0, 0))
        if flush:
            pool.flush_opt(self.off)

    def lines(self) -> set[int]:
        return {self.off >> 6}


class CasLocation:
    """A pool word supporting ``load`` and detectable ``cas``."""

    __slots__ = ("rt", "off")
    SIZE = 8

    def __init__(self, rt: Runtime, off: int):
        if off & 7:
            raise PoolUsageError(f"location at {off:#x} is not aligned")
        self.rt = rt
        self.off = off

    def init(self, value: int) -> None:
        """Non-detectable initial store (object construction only)."""
        self.rt.pool.store_word(self.off, value & STABLE_MASK)

    def load(self, tid: int = 0) -> int:
        cur = self.rt.pool.load_word(self.off)
        return self.load_help(cur)

    def peek(self) -> int:
        """Current value with any annotation stripped, without helping."""
        return self.rt.pool.load_word(self.off) & STABLE_MASK

    def load_help(self, old: int) -> int:
        rt = self.rt
        pool = rt.pool
        loc = self.off
        now = rt.clock.now
        patience = rt.patience
        arrays = rt.arrays
        while True:
            # L2-L3
            tid_old = (old >> TID_SHIFT) & TID_MASK
            if tid_old == 0:
                return old & STABLE_MASK
            p_old = old >> PARITY_SHIFT
            t_cur = now()                                       # L4
            probe.point("dcas.help.L4")
            restart = False
            while True:
                cur = pool.load_word(loc)                       # L5
                if (cur >> TID_SHIFT) & TID_MASK == 0:          # L7
                    return cur & STABLE_MASK
                if cur != old:                                  # L8
                    old = cur
                    restart = True
                    break
                if now() < t_cur + patience:                    # L9
                    probe.point("dcas.help.L9")
                    continue
                # ground truth: whose annotation this helper is about to help
                seen = probe.trace("help_seen", tid_old, p_old, loc, old)
                break
            if restart:
                continue
            t_help = arrays.help_load(p_old, tid_old)           # L10
            if t_cur <= t_help:                                 # L11
                old = pool.load_word(loc)
                continue
            pool.flush_opt(loc)                                 # L12
            probe.point("dcas.help.L12")
            if not arrays.help_cas(p_old, tid_old, t_help, t_cur):  # L13
                old = pool.load_word(loc)
                continue
            rt.help_count += 1
            probe.trace("help", tid_old, p_old, t_cur, seen)
            probe.point("dcas.help.L13")
            pool.flush_opt(arrays.help_offset(p_old, tid_old))  # L16
            stable = old & STABLE_MASK                          # L17
            cur = pool.cas_word(loc, old, stable)
            if cur != old:                                      # L18
                old = cur
                continue
            probe.point("dcas.help.L19")
            return stable                                       # L21

    def cas(self, old: int, new: int, tid: int, mmt: CasMemento,
            recovery: bool = False) -> CasResult:
        rt = self.rt
        pool = rt.pool
        arrays = rt.arrays
        loc = self.off
        if old & ~STABLE_MASK or new & ~STABLE_MASK:
            raise PoolUsageError("cas inputs must be stable (even parity, tid 0)")
        if not 0 < tid < arrays.nthreads:
            raise PoolUsageError(f"thread id {tid} out of range")
        own = arrays.own[tid]                                   # L6
        p_own = own >> PARITY_SHIFT
        t_own = own & TS_MASK
        new1 = (1 - p_own) << PARITY_SHIFT | tid << TID_SHIFT | new     # L8
        ts_succ = 0
        state = 26
        if recovery:
            pt = mmt.load()                                     # L10
            t_mmt = pt & TS_MASK
            cur = pool.load_word(loc)                           # L12
            t_local = arrays.local[tid] & TS_MASK
            if t_mmt < t_local:                                 # L14
                probe.cover("dcas.rec.stale")
                state = 21
            elif pt & FAIL_BIT:                                 # L15-L18
                arrays.local[tid] = pt
                probe.cover("dcas.rec.case2")
                return CasResult(False, self.load_help(cur))
            elif t_mmt != 0 and t_mmt < t_own:                  # L19
                ts_succ = pt
                probe.cover("dcas.rec.case4.L19")
                state = 39
            elif t_mmt != 0:                                    # L20
                ts_succ = pt
                probe.cover("dcas.rec.case4.L20")
                state = 36
            else:
                state = 21
            if state == 21:
                if (cur >> TID_SHIFT) & TID_MASK == tid and cur & STABLE_MASK == new:  # L22
                    probe.cover("dcas.rec.case3.L22")
                    state = 33
                elif t_own < arrays.help_load(1 - p_own, tid):  # L23-L24
                    probe.cover("dcas.rec.case3.L24")
                    state = 34
                else:
                    probe.cover("dcas.rec.case1")
                    state = 26
        while True:
            if state == 26:
                probe.point("dcas.L25")
                cur = pool.cas_word(loc, old, new1)             # L26
                if cur != old:
                    cur = self.load_help(cur)                   # L27
                    if cur == old:                              # L28
                        continue
                    ts_fail = encode_ts(p_own, rt.clock.now(), fail=True)   # L29
                    pool.store_word(mmt.off, ts_fail)           # L30
                    probe.point("dcas.L30")
                    pool.flush(mmt.off)
                    arrays.local[tid] = ts_fail                 # L31
                    probe.point("dcas.L31")
                    return CasResult(False, cur)
                probe.trace("cas_first", tid, 1 - p_own, loc, new1)
                probe.point("dcas.L26")
                state = 33
            elif state == 33:
                pool.flush(loc)                                 # L33
                probe.point("dcas.L33")
                state = 34
            elif state == 34:
                ts_succ = encode_ts(1 - p_own, rt.clock.now())  # L34
                pool.store_word(mmt.off, ts_succ)               # L35
                pool.flush_opt(mmt.off)
                probe.trace("cas_ts", tid, 1 - p_own, ts_succ & TS_MASK)
                probe.point("dcas.L35")
                state = 36
            elif state == 36:
                arrays.own[tid] = ts_succ                       # L36
                # annotate with the parity that was checkpointed, which in a
                # recovery resume may differ from the toggled OWN parity
                annotated = (ts_succ >> PARITY_SHIFT) << PARITY_SHIFT | tid << TID_SHIFT | new
                if pool.cas_word(loc, annotated, new) != annotated:     # L38
                    pool.sfence()
                # persist the stripped word before the next CAS of this thread
                # can start: an annotation resurrected by a later crash would
                # be helped with a fresh timestamp and poison HELP
                pool.flush(loc)
                probe.point("dcas.L38")
                state = 39
            else:
                arrays.local[tid] = ts_succ                     # L39
                return CasResult(True)


def memento_clear(mmt: CasMemento) -> None:
    mmt.clear()
