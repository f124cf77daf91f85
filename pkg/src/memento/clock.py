"""Timestamps and the per-thread arrays shared by the detectable primitives.

The simulated timestamp counter is one global atomic counter per boot: every
read increments it, so it is synchronous across threads, strictly increasing
per thread and trivially serializing.  A reboot resets the raw counter, which
is why :meth:`Clock.calibrate` must run before any mutator.
"""
from __future__ import annotations

import itertools
from typing import Iterable

from .pmem import PmemPool, PoolUsageError

TS_BITS = 62
TS_MASK = (1 << TS_BITS) - 1
PARITY_BIT = 1 << 63
FAIL_BIT = 1 << 62

EVEN = 0
ODD = 1


class ClockOverflowError(OverflowError):
    pass


def encode_ts(parity: int, ts: int, fail: bool = False) -> int:
    return parity << 63 | (FAIL_BIT if fail else 0) | ts


def decode_ts(word: int) -> tuple[int, bool, int]:
    """Return ``(parity, fail, ts)`` of a memento-format word."""
    return word >> 63, bool(word & FAIL_BIT), word & TS_MASK


class Clock:
    def __init__(self, raw_start: int = 1):
        self._raw = itertools.count(raw_start)
        self.offset = 0

    def raw(self) -> int:
        return next(self._raw)

    def now(self) -> int:
        t = next(self._raw) + self.offset
        if t > TS_MASK:
            raise ClockOverflowError("62-bit timestamp space exhausted")
        return t

    def calibrate(self, t_max: int) -> "Clock":
        """Shift this boot's timestamps above every checkpointed ``t_max``."""
        t_init = self.raw()
        self.offset = t_max - t_init
        return self

    def headroom(self) -> int:
        """Ticks left before the timestamp field overflows."""
        return TS_MASK - self.now()


class GlobalArrays:
    """``LOCAL`` and ``OWN`` live in DRAM; ``HELP[2][P]`` lives in the pool.

    ``LOCAL[tid]`` and ``OWN[tid]`` hold memento-format words (parity, fail
    flag, timestamp); HELP entries hold bare timestamps.
    """

    def __init__(self, pool: PmemPool):
        self.pool = pool
        self.nthreads = pool.nthreads
        self.local = [0] * self.nthreads
        self.own = [0] * self.nthreads
        self._help = pool.help_offset

    def check_tid(self, tid: int) -> None:
        if not 0 < tid < self.nthreads:
            raise PoolUsageError(f"thread id {tid} out of range 1..{self.nthreads - 1}")

    def help_offset(self, parity: int, tid: int) -> int:
        return self._help + (parity * self.nthreads + tid) * 8

    def help_load(self, parity: int, tid: int) -> int:
        return self.pool.load_word(self._help + (parity * self.nthreads + tid) * 8)

    def help_cas(self, parity: int, tid: int, old: int, new: int) -> bool:
        """Raise ``HELP[parity][tid]`` from ``old`` to ``new``; False if it moved."""
        return self.pool.cas_word(self.help_offset(parity, tid), old, new) == old

    def help_max(self) -> int:
        pool, base = self.pool, self._help
        return max((pool.load_word(base + i * 8) for i in range(2 * self.nthreads)), default=0)

    def init_own(self, tid: int, words: Iterable[int]) -> int:
        """Set ``OWN[tid]`` to the memento word with the largest timestamp."""
        self.check_tid(tid)
        best = 0
        for w in words:
            if w & TS_MASK > best & TS_MASK:
                best = w
        # OWN only carries parity and timestamp
        self.own[tid] = best & ~FAIL_BIT
        return self.own[tid]

    def reset_local(self, tid: int) -> None:
        self.local[tid] = 0


def calibrate(clock: Clock, pool: PmemPool, timestamps: Iterable[int] = ()) -> Clock:
    """Calibrate ``clock`` against the pool's HELP arrays and ``timestamps``.

    ``timestamps`` should cover every CAS and Checkpoint memento of the
    application (the caller knows the memento layout).
    """
    arrays = GlobalArrays(pool)
    t_max = max(itertools.chain((arrays.help_max(),), (t & TS_MASK for t in timestamps)))
    return clock.calibrate(t_max)
