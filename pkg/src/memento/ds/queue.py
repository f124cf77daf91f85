"""Detectable Michael-Scott queues.

Three variants share the node layout ``[value][next][repl]`` and a root
block holding ``head`` and ``tail`` on separate cachelines:

``MsqCas``
    every pointer is a detectable-CAS location.
``MsqIndel``
    ``next`` and ``head`` are insert/delete locations; ``tail`` is a plain
    pool word updated by CAS and flushed.
``MsqVol``
    like ``MsqIndel`` but ``tail`` lives in DRAM.  It is reset to ``head`` at
    boot, only moves over persisted links, and loads between head and tail
    skip link-and-persist.
"""
from __future__ import annotations

from ..dcas import STABLE_MASK, CasLocation
from ..insdel import PERSIST, VALUE_MASK, InsDelLocation
from ..pmem import LINE, NULL, OFFSET_MASK
from .base import (EMPTY, NEXT, OP_INSERT, OP_REMOVE, REPL, VALUE, CorruptionError, OpContext,
                   Structure, VolatileWord)
from .layout import CAS, CKPT, Field

HEAD = 0
# next cacheline of the root block (handles sit 8 bytes into their block)
TAIL = LINE - 8


class _Queue(Structure):
    ROOT_SIZE = TAIL + 8

    def _init_root(self) -> None:
        dummy = self.new_node(0)
        self.pool.store_word(self.root + HEAD, dummy)
        self.pool.store_word(self.root + TAIL, dummy)

    def locations(self) -> list[int]:
        return [self.root + HEAD, self.root + TAIL]

    def head(self) -> int:
        return self.load_link(self.root + HEAD)

    def nodes(self) -> list[int]:
        return list(self.chain(self.head()))

    def traverse(self) -> list[int]:
        load = self.pool.load_word
        return [load(n + VALUE) for n in self.nodes()[1:]]

    def prefill(self, values) -> None:
        pool = self.pool
        tail = self.nodes()[-1]
        for v in values:
            n = self.new_node(v)
            pool.store_word(tail + NEXT, n)
            pool.flush(tail + NEXT)
            tail = n
        pool.store_word(self.root + TAIL, tail)
        pool.flush(self.root + TAIL)


class MsqCas(_Queue):
    NAME = "msq-cas"
    MEMENTOS = {
        OP_INSERT: (
            Field("node", CKPT, 1, handles=(0,)),
            Field("snap", CKPT, 2, handles=(0, 1)),
            Field("link", CAS),
            Field("help_swing", CAS),
            Field("swing", CAS),
        ),
        OP_REMOVE: (
            Field("snap", CKPT, 3, handles=(0, 1)),
            Field("help_swing", CAS),
            Field("cas", CAS),
            Field("ret", CKPT, 1),
        ),
    }

    def __init__(self, rt, alloc, root):
        super().__init__(rt, alloc, root)
        self._head = CasLocation(rt, root + HEAD)
        self._tail = CasLocation(rt, root + TAIL)

    def load_link(self, off: int) -> int:
        return self.pool.load_word(off) & STABLE_MASK & OFFSET_MASK

    def _tail_snapshot(self) -> tuple[int, int]:
        tail = self._tail.load()
        return tail, CasLocation(self.rt, tail + NEXT).load()

    def _head_snapshot(self) -> tuple[int, int, int]:
        head = self._head.load()
        tail = self._tail.load()
        return head, CasLocation(self.rt, head + NEXT).load(), int(head == tail)

    def insert(self, ctx: OpContext, value: int) -> None:
        tid, m = ctx.tid, ctx.memento
        node = m.node.checkpoint(lambda: self.new_node(value), tid).value
        while True:
            tail, nxt = m.snap.checkpoint(self._tail_snapshot, tid).value
            if nxt != NULL:
                self._tail.cas(tail, nxt, tid, m.help_swing, ctx.rec("help_swing"))
                continue
            link = CasLocation(self.rt, tail + NEXT)
            if link.cas(NULL, node, tid, m.link, ctx.rec("link")).ok:
                break
        self._tail.cas(tail, node, tid, m.swing, ctx.rec("swing"))

    def remove(self, ctx: OpContext) -> int:
        tid, m = ctx.tid, ctx.memento
        while True:
            head, nxt, at_tail = m.snap.checkpoint(self._head_snapshot, tid).value
            if nxt == NULL:
                return m.ret.checkpoint(EMPTY, tid).value
            if at_tail:
                self._tail.cas(head, nxt, tid, m.help_swing, ctx.rec("help_swing"))
                continue
            if self._head.cas(head, nxt, tid, m.cas, ctx.rec("cas")).ok:
                value = m.ret.checkpoint(lambda: self.pool.load_word(nxt + VALUE), tid).value
                ctx.retire(head)
                return value


class MsqIndel(_Queue):
    NAME = "msq-indel"
    MEMENTOS = {
        OP_INSERT: (
            Field("node", CKPT, 1, handles=(0,)),
            Field("tail", CKPT, 1, handles=(0,)),
        ),
        OP_REMOVE: (
            Field("snap", CKPT, 3, handles=(0, 1)),
            Field("ret", CKPT, 1),
        ),
    }

    def __init__(self, rt, alloc, root):
        super().__init__(rt, alloc, root)
        self._head = InsDelLocation(rt, root + HEAD, REPL)

    def load_link(self, off: int) -> int:
        return self.pool.load_word(off) & OFFSET_MASK

    def _next(self, node: int) -> InsDelLocation:
        return InsDelLocation(self.rt, node + NEXT, REPL)

    # tail handling, overridden by the volatile variant
    def _load_tail(self) -> int:
        return self.pool.load_word(self.root + TAIL)

    def _swing_tail(self, old: int, new: int) -> None:
        off = self.root + TAIL
        if self.pool.cas_word(off, old, new) == old:
            self.pool.flush(off)

    def _load_next(self, head: int, tail: int) -> int:
        return self._next(head).load()

    def _head_snapshot(self) -> tuple[int, int, int]:
        head = self._head.load()
        tail = self._load_tail()
        return head, self._load_next(head, tail), int(head == tail)

    def insert(self, ctx: OpContext, value: int) -> None:
        tid, m = ctx.tid, ctx.memento
        node = m.node.checkpoint(lambda: self.new_node(value), tid).value
        detected = False
        while True:
            tail = m.tail.checkpoint(self._load_tail, tid).value
            loc = self._next(tail)
            if ctx.rec("insert"):
                if loc.insert(node, self, recovery=True).ok:
                    detected = True
                    break
                # spurious failure: retry in a fresh normal-mode iteration
                continue
            nxt = loc.load()
            if nxt != NULL:
                self._swing_tail(tail, nxt)
                continue
            if loc.insert(node, self).ok:
                break
        if not (detected and self.TAIL_NORMAL_ONLY):
            self._swing_tail(tail, node)

    TAIL_NORMAL_ONLY = False

    def remove(self, ctx: OpContext) -> int:
        tid, m = ctx.tid, ctx.memento
        while True:
            head, nxt, at_tail = m.snap.checkpoint(self._head_snapshot, tid).value
            if nxt == NULL:
                return m.ret.checkpoint(EMPTY, tid).value
            if at_tail:
                self._swing_tail(head, nxt)
                continue
            if self._head.delete(head, nxt, tid, ctx.rec("delete"), ctx).ok:
                return m.ret.checkpoint(lambda: self.pool.load_word(nxt + VALUE), tid).value

    def logical_head(self) -> int:
        """``head`` with committed but unapplied deletions applied."""
        load = self.pool.load_word
        h = self.head()
        hops = 0
        while h and load(h + REPL):
            h = load(h + REPL) & OFFSET_MASK
            hops += 1
            if hops > self.pool.capacity // LINE:
                raise CorruptionError("replacement chain does not terminate")
        return h

    def traverse(self) -> list[int]:
        load = self.pool.load_word
        return [load(n + VALUE) for n in list(self.chain(self.logical_head()))[1:]]

    def _normalize_head(self) -> None:
        h = self.logical_head()
        if h != self.head():
            self.pool.store_word(self.root + HEAD, h)
            self.pool.flush(self.root + HEAD)

    def boot_recover(self) -> None:
        self._normalize_head()
        tail = self._load_tail()
        if tail not in self.nodes():
            off = self.root + TAIL
            self.pool.store_word(off, self.head())
            self.pool.flush(off)

    def check_invariants(self) -> list[str]:
        nodes = self.nodes()
        tail = self._load_tail()
        if tail not in nodes:
            return [f"tail {tail:#x} not reachable from head"]
        return []


class MsqVol(MsqIndel):
    NAME = "msq-vol"
    TAIL_NORMAL_ONLY = True

    def __init__(self, rt, alloc, root):
        super().__init__(rt, alloc, root)
        self.tail = VolatileWord(self.head())

    def _init_root(self) -> None:
        super()._init_root()
        self.tail = VolatileWord(self.pool.load_word(self.root + HEAD))

    def locations(self) -> list[int]:
        return [self.root + HEAD]

    def _load_tail(self) -> int:
        return self.tail.load()

    def _swing_tail(self, old: int, new: int) -> None:
        self.tail.cas(old, new)

    def _load_next(self, head: int, tail: int) -> int:
        if head != tail:
            # every link between head and tail is persisted
            return self.pool.load_word(head + NEXT) & VALUE_MASK & ~PERSIST
        return self._next(head).load()

    def boot_recover(self) -> None:
        self._normalize_head()
        self.tail = VolatileWord(self.head())

    def prefill(self, values) -> None:
        super().prefill(values)
        self.tail = VolatileWord(self.pool.load_word(self.root + TAIL))

    def check_invariants(self) -> list[str]:
        out = []
        nodes = self.nodes()
        tail = self.tail.load()
        if tail not in nodes:
            return [f"tail {tail:#x} not reachable from head"]
        pool = self.pool
        for n in nodes:
            if n == tail:
                break
            off = n + NEXT
            if pool.load_word(off) & VALUE_MASK != pool.persisted_word(off) & VALUE_MASK:
                out.append(f"link {off:#x} between head and tail is not persisted")
        return out
