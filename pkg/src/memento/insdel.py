"""Atomic pointer location supporting detectable insert and delete.

Insert replaces Null with a block; delete detaches a block by first
installing its replacement in the block's own ``repl`` word, which is the
commit point, and only then swinging the location.  Contention is spread
over the blocks' ``repl`` words instead of piling on the location.

Word layouts (bit 63 first)::

    location  persist:1 | reserved:8 | tag:10 | offset:45
    repl      tid:9 | tag:10 | offset:45                 tid 0 = not replaced

A cleared persist bit certifies the value is durable (link-and-persist).
Insert and delete keep no memento: insert recovery checks whether the block
is reachable in the structure or already replaced, delete recovery reads the
``repl`` word.
"""
from __future__ import annotations

from typing import NamedTuple, Optional, Protocol

from . import probe
from .pmem import NULL, OFFSET_MASK, PoolUsageError
from .runtime import Runtime

PERSIST = 1 << 63
TAG_BITS = 10
TAG_SHIFT = 45
TAG_MASK = (1 << TAG_BITS) - 1
VALUE_MASK = (1 << 55) - 1
REPL_TID_SHIFT = 55
REPL_TID_MASK = (1 << 9) - 1


def encode(persist: bool, offset: int, tag: int = 0) -> int:
    if not (0 <= offset <= OFFSET_MASK and 0 <= tag <= TAG_MASK):
        raise ValueError(f"field out of range: offset={offset:#x} tag={tag}")
    return (PERSIST if persist else 0) | tag << TAG_SHIFT | offset


def decode(word: int) -> tuple[bool, int, int]:
    """Return ``(persist, tag, offset)``."""
    return bool(word & PERSIST), (word >> TAG_SHIFT) & TAG_MASK, word & OFFSET_MASK


def encode_repl(tid: int, value: int) -> int:
    if not 0 < tid <= REPL_TID_MASK:
        raise ValueError(f"thread id {tid} out of range")
    return tid << REPL_TID_SHIFT | (value & VALUE_MASK)


def decode_repl(word: int) -> tuple[int, int, int]:
    """Return ``(tid, tag, offset)``."""
    return word >> REPL_TID_SHIFT, (word >> TAG_SHIFT) & TAG_MASK, word & OFFSET_MASK


class Traversable(Protocol):
    def contains(self, block: int) -> bool:
        """Exact membership test; only called on quiesced structures."""


class Reclamation(Protocol):
    def defer_flush(self, off: int) -> None: ...

    def retire(self, block: int) -> None: ...


class InsDelResult(NamedTuple):
    ok: bool
    #: on success of delete: the detached value; on failure: the current value
    value: int = 0
    #: a recovery-mode insert failure that did not observe a real conflict
    spurious: bool = False


class InsDelLocation:
    __slots__ = ("rt", "off", "repl_disp")
    SIZE = 8

    def __init__(self, rt: Runtime, off: int, repl_disp: int):
        if off & 7:
            raise PoolUsageError(f"location at {off:#x} is not aligned")
        self.rt = rt
        self.off = off
        #: byte displacement of the ``repl`` word inside a block
        self.repl_disp = repl_disp

    def init(self, value: int) -> None:
        self.rt.pool.store_word(self.off, value & VALUE_MASK)

    def peek(self) -> int:
        return self.rt.pool.load_word(self.off) & VALUE_MASK

    def load(self) -> int:
        rt = self.rt
        pool = rt.pool
        loc = self.off
        now = rt.clock.now
        old = pool.load_word(loc)                               # L2
        while True:
            if not old & PERSIST:                               # L4
                return old
            t = now()                                           # L5
            while True:
                cur = pool.load_word(loc)                       # L6
                if not cur & PERSIST:                           # L8
                    return cur
                if cur != old:                                  # L9
                    break
                if now() < t + rt.patience:                     # L10
                    probe.point("insdel.load.L10")
                    continue
                pool.flush(loc)                                 # L11
                probe.point("insdel.load.L11")
                cleared = old & ~PERSIST
                cur = pool.cas_word(loc, old, cleared)          # L13
                if cur == old:
                    return cleared
                break
            old = cur

    def insert(self, new: int, ds: Optional[Traversable], recovery: bool = False) -> InsDelResult:
        pool = self.rt.pool
        loc = self.off
        new &= VALUE_MASK
        if recovery:
            block = new & OFFSET_MASK
            if (ds is not None and ds.contains(block)) or pool.load_word(block + self.repl_disp):
                probe.cover("insdel.insert.rec.ok")
                return InsDelResult(True, new)
            probe.cover("insdel.insert.rec.spurious")
            return InsDelResult(False, self.load(), spurious=True)
        probe.point("insdel.insert.L20")
        marked = PERSIST | new
        if pool.cas_word(loc, NULL, marked) != NULL:            # L21
            return InsDelResult(False, self.load())
        probe.point("insdel.insert.L21")
        pool.flush(loc)                                         # L24
        probe.point("insdel.insert.L24")
        pool.cas_word(loc, marked, new)                         # L25
        probe.point("insdel.insert.L25")
        return InsDelResult(True, new)

    def delete(self, old: int, new: int, tid: int, recovery: bool = False,
               cs: Optional[Reclamation] = None) -> InsDelResult:
        rt = self.rt
        pool = rt.pool
        loc = self.off
        old &= VALUE_MASK
        new &= VALUE_MASK
        repl = (old & OFFSET_MASK) + self.repl_disp
        if recovery:
            tid_new = pool.load_word(repl) >> REPL_TID_SHIFT    # L29
            if tid_new != tid:                                  # L30
                probe.cover("insdel.delete.rec.case1")
                return InsDelResult(False, self.load_help(old))
            probe.cover("insdel.delete.rec.case2")
        else:
            probe.point("insdel.delete.L33")
            if pool.cas_word(repl, NULL, encode_repl(tid, new)) != NULL:   # L34
                return InsDelResult(False, self.load_help(old))
            probe.trace("commit", tid, old & OFFSET_MASK)
            probe.point("insdel.delete.L34")
        pool.flush_opt(repl)                                    # L37
        probe.point("insdel.delete.L37")
        if pool.cas_word(loc, old, new) != old:                 # L38
            pool.sfence()
        probe.point("insdel.delete.L38")
        if cs is not None:
            if not rt.omit_delete_flush:
                cs.defer_flush(loc)
            cs.retire(old & OFFSET_MASK)
        probe.point("insdel.delete.retired")
        return InsDelResult(True, old)

    def load_help(self, old: int) -> int:
        rt = self.rt
        pool = rt.pool
        loc = self.off
        if old & OFFSET_MASK == NULL:                           # L2
            return old
        repl = (old & OFFSET_MASK) + self.repl_disp
        new = pool.load_word(repl)                              # L3-L4
        if new == 0:                                            # L5
            return old
        o_new = new & VALUE_MASK
        now = rt.clock.now
        t = now()                                               # L6
        while True:
            cur = pool.load_word(loc)                           # L7
            if cur != old:                                      # L8
                return self.load() if cur & PERSIST else cur
            if now() < t + rt.patience:                         # L9
                probe.point("insdel.help.L9")
                continue
            break
        pool.flush_opt(repl)                                    # L10
        probe.point("insdel.help.L10")
        cur = pool.cas_word(loc, old, o_new)                    # L11
        if cur != old:
            return self.load() if cur & PERSIST else cur        # L12
        rt.help_count += 1
        probe.point("insdel.help.L13")
        return o_new                                            # L13
