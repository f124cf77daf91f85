"""Detectable Treiber stack composed from checkpoints and detectable CAS."""
from __future__ import annotations

from ..dcas import STABLE_MASK, CasLocation
from ..pmem import NULL, OFFSET_MASK
from .base import EMPTY, NEXT, OP_INSERT, OP_REMOVE, VALUE, OpContext, Structure
from .layout import CAS, CKPT, Field

TOP = 0


class TreiberStack(Structure):
    NAME = "stack"
    ROOT_SIZE = 8
    OP_NAMES = {OP_INSERT: "push", OP_REMOVE: "pop"}
    MEMENTOS = {
        OP_INSERT: (
            Field("node", CKPT, 1, handles=(0,)),
            Field("top", CKPT, 1, handles=(0,)),
            Field("cas", CAS),
        ),
        OP_REMOVE: (
            Field("snap", CKPT, 2, handles=(0, 1)),
            Field("cas", CAS),
            Field("ret", CKPT, 1),
        ),
    }

    def __init__(self, rt, alloc, root):
        super().__init__(rt, alloc, root)
        self._top = CasLocation(rt, root + TOP)

    def _init_root(self) -> None:
        self.pool.store_word(self.root + TOP, NULL)

    def load_link(self, off: int) -> int:
        return self.pool.load_word(off) & STABLE_MASK & OFFSET_MASK

    def locations(self) -> list[int]:
        return [self.root + TOP]

    def nodes(self) -> list[int]:
        return list(self.chain(self.load_link(self.root + TOP)))

    def traverse(self) -> list[int]:
        """Payloads from top to bottom."""
        load = self.pool.load_word
        return [load(n + VALUE) for n in self.nodes()]

    def _snapshot(self) -> tuple[int, int]:
        top = self._top.load()
        return top, (self.load_link(top + NEXT) if top != NULL else NULL)

    def insert(self, ctx: OpContext, value: int) -> None:
        tid, m = ctx.tid, ctx.memento
        pool = self.pool
        node = m.node.checkpoint(lambda: self.new_node(value), tid).value
        while True:
            top = m.top.checkpoint(self._top.load, tid).value
            # idempotent: a replay rewrites the value the first attempt wrote
            pool.store_word(node + NEXT, top)
            pool.flush(node + NEXT)
            if self._top.cas(top, node, tid, m.cas, ctx.rec("cas")).ok:
                return

    def remove(self, ctx: OpContext) -> int:
        tid, m = ctx.tid, ctx.memento
        while True:
            top, nxt = m.snap.checkpoint(self._snapshot, tid).value
            if top == NULL:
                return m.ret.checkpoint(EMPTY, tid).value
            if self._top.cas(top, nxt, tid, m.cas, ctx.rec("cas")).ok:
                value = m.ret.checkpoint(lambda: self.pool.load_word(top + VALUE), tid).value
                ctx.retire(top)
                return value

    def prefill(self, values) -> None:
        pool = self.pool
        top = self.load_link(self.root + TOP)
        for v in values:
            n = self.new_node(v)
            pool.store_word(n + NEXT, top)
            pool.flush(n + NEXT)
            top = n
        pool.store_word(self.root + TOP, top)
        pool.flush(self.root + TOP)
