"""Crash-atomic stabilization of a value into a two-slot memento.

In-pool layout, 8-byte aligned::

    [ts0][buf0 ...][ts1][buf1 ...]

Each buffer holds ``nwords`` 64-bit words.  Pairs that fit one cacheline
persist with a single flush because writes to one line reach the media in
order; larger pairs flush the buffer before stamping the timestamp.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Optional, Union

from . import probe
from .clock import TS_MASK
from .pmem import LINE, PoolUsageError
from .runtime import Runtime

Value = Union[int, tuple]


class Stabilized(NamedTuple):
    value: Value
    #: True when a pre-crash execution already checkpointed this step
    detected: bool


class CheckpointSlots:
    """The memento of one ``checkpoint`` site."""

    __slots__ = ("rt", "off", "nwords", "_stride", "single_line")

    def __init__(self, rt: Runtime, off: int, nwords: int = 1):
        if off & 7:
            raise PoolUsageError(f"checkpoint memento at {off:#x} is not 8-byte aligned")
        if nwords < 1:
            raise ValueError("nwords must be positive")
        self.rt = rt
        self.off = off
        self.nwords = nwords
        self._stride = 8 * (1 + nwords)
        self.single_line = off // LINE == (off + self.size() - 1) // LINE

    @staticmethod
    def size_for(nwords: int) -> int:
        return 16 * (1 + nwords)

    def size(self) -> int:
        return 2 * self._stride

    def _slot(self, i: int) -> int:
        return self.off + i * self._stride

    def _latest(self) -> tuple[int, int]:
        load = self.rt.pool.load_word
        t0 = load(self.off)
        t1 = load(self.off + self._stride)
        assert t0 != t1 or t0 == 0, "two checkpoint slots share a timestamp"
        return (0, t0) if t0 > t1 else (1, t1)

    def _read_buf(self, slot: int) -> Value:
        load = self.rt.pool.load_word
        base = self._slot(slot) + 8
        if self.nwords == 1:
            return load(base)
        return tuple(load(base + 8 * k) for k in range(self.nwords))

    def checkpoint(self, value: Union[Value, Callable[[], Value]], tid: int) -> Stabilized:
        """Stabilize ``value`` for thread ``tid``.

        ``value`` may be a zero-argument callable, evaluated only when the
        step was not already performed before a crash (so a replayed
        allocation is not repeated).
        """
        rt = self.rt
        pool = rt.pool
        arrays = rt.arrays
        latest, ts = self._latest()
        if ts > arrays.local[tid] & TS_MASK:
            arrays.local[tid] = ts
            probe.point("ckpt.replay")
            return Stabilized(self._read_buf(latest), True)
        if callable(value):
            value = value()
        stale = 1 - latest if ts else 0
        slot = self._slot(stale)
        words = (value,) if self.nwords == 1 else value
        if len(words) != self.nwords:
            raise ValueError(f"expected {self.nwords} words, got {len(words)}")
        for k, w in enumerate(words):
            pool.store_word(slot + 8 + 8 * k, w)
        probe.point("ckpt.buf")
        if not self.single_line:
            for line in sorted({a >> 6 for a in range(slot + 8, slot + 8 + 8 * self.nwords, 8)}):
                pool.flush(line << 6)
            probe.point("ckpt.buf_flushed")
        new_ts = rt.clock.now()
        pool.store_word(slot, new_ts)
        probe.point("ckpt.ts")
        pool.flush(slot)
        arrays.local[tid] = new_ts
        probe.point("ckpt.done")
        return Stabilized(value, False)

    def peek(self) -> Optional[tuple[int, Value]]:
        """Latest ``(ts, value)``, or None for a fresh or cleared memento."""
        latest, ts = self._latest()
        if ts == 0:
            return None
        return ts, self._read_buf(latest)

    def max_timestamp(self) -> int:
        return self._latest()[1]

    def clear(self, flush: bool = True) -> None:
        pool = self.rt.pool
        pool.store_word(self.off, 0)
        probe.point("ckpt.clear")
        pool.store_word(self.off + self._stride, 0)
        if flush:
            pool.flush(self.off)
            if not self.single_line:
                pool.flush(self.off + self._stride)

    def lines(self) -> set[int]:
        return {self.off >> 6, (self.off + self._stride) >> 6}
