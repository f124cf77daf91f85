"""Safe memory reclamation for the pool.

Epoch-based reclamation with three twists needed for detectable operations:

* locations whose new value must be durable before a retired block may be
  freed are registered with :meth:`Reclaimer.defer_flush` and flushed in one
  batch, merged per cacheline, when the section ends;
* a crashed thread's critical section is retained and handed to its
  replacement by :meth:`Reclaimer.revive`, and duplicate retirements in one
  section are tolerated and deduplicated at :meth:`Reclaimer.unpin`;
* root mementos are cleared under a persistent ``clearing`` flag so a crash
  in the middle of a clear is resumed instead of leaving half-stale state.
"""
from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol

from . import probe
from .pmem import PmemAllocator, PoolError, PoolUsageError
from .runtime import Runtime

#: a block retired in epoch ``e`` is freed once the global epoch reaches ``e + GRACE``
GRACE = 2


class RetireError(PoolError):
    """Retirement of a block the allocator does not consider allocated."""


@dataclass(eq=False)
class CriticalSection:
    tid: int
    epoch: int
    #: cachelines whose flush is deferred to the end of the section
    defer: set = field(default_factory=set)
    #: retired block handles, duplicates allowed
    retired: list = field(default_factory=list)
    handed_off: bool = False
    open: bool = True

    def defer_flush(self, off: int) -> None:
        self.defer.add(off >> 6)


class Reclaimer:
    """Global epoch plus one pinned epoch per open section."""

    def __init__(self, pool, alloc: PmemAllocator, check: bool = True,
                 on_event: Optional[Callable[..., None]] = None):
        self.pool = pool
        self.alloc = alloc
        self.check = check
        self.on_event = on_event
        self.global_epoch = 0
        self.sections: dict[int, CriticalSection] = {}
        self.limbo: dict[int, list[int]] = defaultdict(list)
        self._lock = threading.RLock()

    def pin(self, tid: int) -> CriticalSection:
        with self._lock:
            if tid in self.sections:
                raise PoolUsageError(f"thread {tid} already has an open section; revive it")
            cs = CriticalSection(tid, self.global_epoch)
            self.sections[tid] = cs
            return cs

    def revive(self, tid: int) -> CriticalSection:
        """The section a crashed thread left open, or a fresh one."""
        with self._lock:
            cs = self.sections.get(tid)
        return cs if cs is not None else self.pin(tid)

    def has_section(self, tid: int) -> bool:
        return tid in self.sections

    def retire(self, cs: CriticalSection, block: int) -> None:
        if self.check and not self.alloc.is_allocated(block):
            raise RetireError(f"retire of unallocated block {block:#x}")
        cs.retired.append(block)
        if self.on_event is not None:
            self.on_event("retire", cs.tid, block)

    def defer_flush(self, cs: CriticalSection, off: int) -> None:
        cs.defer.add(off >> 6)

    def unpin(self, cs: CriticalSection) -> None:
        """End ``cs``.  Safe to call again after a crash part-way through."""
        probe.point("smr.unpin.begin")
        flush = self.pool.flush
        for line in sorted(cs.defer):
            flush(line << 6)
            probe.point("smr.unpin.flush")
        with self._lock:
            if not cs.handed_off:
                # epoch of hand-off, not of pin: readers pinned since then may
                # still hold references
                self.limbo[self.global_epoch].extend(dict.fromkeys(cs.retired))
                cs.handed_off = True
            cs.open = False
            if self.sections.get(cs.tid) is cs:
                del self.sections[cs.tid]
        probe.point("smr.unpin.handoff")
        self.collect()
        probe.point("smr.unpin.done")

    def try_advance(self) -> bool:
        with self._lock:
            g = self.global_epoch
            if all(s.epoch == g for s in self.sections.values()):
                self.global_epoch = g + 1
                return True
            return False

    def collect(self) -> int:
        """Advance if possible and free every block past its grace period."""
        self.try_advance()
        freed = 0
        with self._lock:
            ripe = [e for e in self.limbo if e + GRACE <= self.global_epoch]
            batches = [self.limbo.pop(e) for e in sorted(ripe)]
        for blocks in batches:
            for b in blocks:
                self.alloc.free(b)
                freed += 1
        return freed

    def drain(self) -> int:
        """Free everything retired so far; only valid with no open section."""
        if self.sections:
            raise PoolUsageError("drain with open sections")
        freed = 0
        for _ in range(GRACE + 1):
            freed += self.collect()
        probe.point("smr.drain.done")
        return freed

    def pending(self) -> int:
        return sum(len(v) for v in self.limbo.values())


class Clearable(Protocol):
    def clear(self, flush: bool = True) -> None: ...

    def lines(self) -> set: ...


ACTIVE = 1 << 63
KIND_SHIFT = 48
SEQ_MASK = (1 << KIND_SHIFT) - 1


class RootRecord:
    """Per-thread root memento header, one cacheline in the clearing region.

    Words: ``[descriptor, argument, clearing flag, OWN floor]``.  The
    descriptor packs ``active:1 | kind:15 | seq:48``; an active descriptor
    marks both an operation in flight and an open critical section.  The OWN
    floor keeps the thread's last CAS parity and timestamp once its CAS
    mementos are cleared.
    """

    __slots__ = ("rt", "tid", "off")

    def __init__(self, rt: Runtime, tid: int):
        rt.arrays.check_tid(tid)
        self.rt = rt
        self.tid = tid
        self.off = rt.pool.clearing_offset + tid * 64

    @property
    def desc(self) -> int:
        return self.rt.pool.load_word(self.off)

    @property
    def active(self) -> bool:
        return bool(self.desc & ACTIVE)

    @property
    def kind(self) -> int:
        return (self.desc & ~ACTIVE) >> KIND_SHIFT

    @property
    def seq(self) -> int:
        return self.desc & SEQ_MASK

    @property
    def arg(self) -> int:
        return self.rt.pool.load_word(self.off + 8)

    @property
    def clearing(self) -> bool:
        return bool(self.rt.pool.load_word(self.off + 16))

    @property
    def own_floor(self) -> int:
        return self.rt.pool.load_word(self.off + 24)

    def begin(self, kind: int, seq: int, arg: int) -> None:
        pool = self.rt.pool
        pool.store_word(self.off, ACTIVE | kind << KIND_SHIFT | (seq & SEQ_MASK))
        pool.store_word(self.off + 8, arg)
        pool.flush(self.off)

    def clear(self, mementos: Iterable[Clearable]) -> None:
        """Clear every sub-memento of the finished operation."""
        pool = self.rt.pool
        pool.store_word(self.off + 24, self.rt.arrays.own[self.tid])
        pool.store_word(self.off + 16, 1)
        pool.flush(self.off)
        probe.point("smr.clear.flag")
        self.finish_clear(mementos)

    def finish_clear(self, mementos: Iterable[Clearable]) -> None:
        """Second half of :meth:`clear`; also the resume path after a crash."""
        pool = self.rt.pool
        lines: set = set()
        for m in mementos:
            m.clear(flush=False)
            lines |= m.lines()
            probe.point("smr.clear.sub")
        for line in sorted(lines):
            pool.flush_opt(line << 6)
        pool.sfence()
        probe.point("smr.clear.fenced")
        pool.store_word(self.off, self.desc & ~ACTIVE)
        pool.store_word(self.off + 16, 0)
        pool.flush(self.off)
        probe.point("smr.clear.done")
