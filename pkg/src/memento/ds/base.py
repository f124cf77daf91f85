"""Node layout, operation context and the base class of detectable structures."""
from __future__ import annotations

import threading
from typing import Iterator, Optional

from ..pmem import NULL, PmemAllocator, PoolError
from ..runtime import Runtime
from ..smr import CriticalSection, Reclaimer
from .layout import Field, Memento

# node payload words, relative to the block handle
VALUE = 0
NEXT = 8
REPL = 16
NODE_SIZE = 24

#: checkpointed result of a dequeue or pop that found the structure empty
EMPTY = (1 << 64) - 1

OP_INSERT = 1
OP_REMOVE = 2


class CorruptionError(PoolError):
    """A traversal found a cycle or a pointer outside the heap."""


class OpContext:
    """Everything one execution of a root operation needs.

    ``recovering`` is true when the execution resumes a memento left by a
    crashed execution.  Each detectable sub-operation is invoked in recovery
    mode only the first time its sub-memento is used in such an execution;
    later loop iterations run in normal mode.
    """

    __slots__ = ("tid", "memento", "recovering", "cs", "reclaimer", "_used")

    def __init__(self, tid: int, memento: Memento, recovering: bool,
                 cs: Optional[CriticalSection], reclaimer: Optional[Reclaimer]):
        self.tid = tid
        self.memento = memento
        self.recovering = recovering
        self.cs = cs
        self.reclaimer = reclaimer
        self._used: set = set()

    def rec(self, name: str) -> bool:
        if not self.recovering or name in self._used:
            return False
        self._used.add(name)
        return True

    def retire(self, block: int) -> None:
        if self.reclaimer is not None:
            self.reclaimer.retire(self.cs, block)

    def defer_flush(self, off: int) -> None:
        if self.cs is not None:
            self.cs.defer_flush(off)


class VolatileWord:
    """A DRAM word with compare-and-swap, lost on a full-system crash."""

    __slots__ = ("value", "_lock")

    def __init__(self, value: int = 0):
        self.value = value
        self._lock = threading.Lock()

    def load(self) -> int:
        return self.value

    def cas(self, old: int, new: int) -> bool:
        with self._lock:
            if self.value != old:
                return False
            self.value = new
            return True


class Structure:
    """Common plumbing of a detectable structure rooted at one pool block."""

    NAME = ""
    ROOT_SIZE = 64
    #: op code -> memento fields of that root operation
    MEMENTOS: dict[int, tuple[Field, ...]] = {}
    OP_NAMES = {OP_INSERT: "enq", OP_REMOVE: "deq"}

    def __init__(self, rt: Runtime, alloc: PmemAllocator, root: int):
        self.rt = rt
        self.pool = rt.pool
        self.alloc = alloc
        self.root = root

    @classmethod
    def create(cls, rt: Runtime, alloc: PmemAllocator) -> "Structure":
        root = alloc.alloc(cls.ROOT_SIZE)
        ds = cls(rt, alloc, root)
        ds._init_root()
        alloc.publish(root)
        return ds

    def _init_root(self) -> None:
        raise NotImplementedError

    def new_node(self, value: int) -> int:
        h = self.alloc.alloc(NODE_SIZE)
        self.pool.store_word(h + VALUE, value)
        self.alloc.publish(h)
        return h

    def run(self, ctx: OpContext, op: int, arg: int) -> int:
        if op == OP_INSERT:
            self.insert(ctx, arg)
            return 0
        if op == OP_REMOVE:
            return self.remove(ctx)
        raise ValueError(f"unknown operation {op}")

    def insert(self, ctx: OpContext, value: int) -> None:
        raise NotImplementedError

    def remove(self, ctx: OpContext) -> int:
        raise NotImplementedError

    def chain(self, start: int) -> Iterator[int]:
        """Nodes reachable from ``start`` through ``next`` links."""
        seen: set = set()
        node = start
        heap_lo = self.pool.heap_start
        cap = self.pool.capacity
        while node != NULL:
            if node in seen:
                raise CorruptionError(f"cycle through node {node:#x}")
            if not heap_lo < node < cap:
                raise CorruptionError(f"pointer {node:#x} outside the heap")
            seen.add(node)
            yield node
            node = self.load_link(node + NEXT)

    def load_link(self, off: int) -> int:
        raise NotImplementedError

    def traverse(self) -> list[int]:
        raise NotImplementedError

    def nodes(self) -> list[int]:
        """Every node the structure currently references (for the UAF sweep)."""
        raise NotImplementedError

    def contains(self, block: int) -> bool:
        return block in self.nodes()

    def locations(self) -> list[int]:
        """Pool words of the root that hold block pointers."""
        raise NotImplementedError

    def boot_recover(self) -> None:
        """Structure-specific repair run by the monitor before any worker."""

    def check_invariants(self) -> list[str]:
        return []

    def prefill(self, values) -> None:
        raise NotImplementedError
