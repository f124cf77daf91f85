"""Verifiers run over histories, final states and crash images."""
from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..clock import TS_MASK
from ..ds.base import REPL, CorruptionError
from ..ds.queue import MsqIndel
from ..pmem import OFFSET_MASK
from .log import FREE, INV, RES, RETIRE, Event


@dataclass
class Report:
    ok: bool = True
    problems: list = field(default_factory=list)

    def fail(self, msg: str) -> None:
        self.ok = False
        if len(self.problems) < 50:
            self.problems.append(msg)

    def __bool__(self) -> bool:
        return self.ok


# ---------------------------------------------------------------------- #
# exactly-once
# ---------------------------------------------------------------------- #

INSERT_OPS = ("enq", "push")
REMOVE_OPS = ("deq", "pop")


def verify_exactly_once(events: Iterable[Event], final: Iterable[int],
                        initial: Iterable[int] = ()) -> Report:
    """Every inserted value is removed or still present exactly once.

    Also checks that each logical operation got a response and that all
    responses of one operation (repeated across crashes) agree.
    """
    rep = Report()
    invoked: dict = {}
    results: dict = defaultdict(set)
    for ev in events:
        if ev.kind == INV:
            key = (ev.tid, ev.seq)
            if key in invoked:
                rep.fail(f"operation {key} invoked twice")
            invoked[key] = ev
        elif ev.kind == RES:
            results[(ev.tid, ev.seq)].add((ev.op, ev.args, ev.result))
    inserted: Counter = Counter(initial)
    removed: Counter = Counter()
    for key, inv in invoked.items():
        got = results.get(key)
        if not got:
            rep.fail(f"operation {key} ({inv.op}) never responded")
            continue
        if len(got) > 1:
            rep.fail(f"operation {key} responded inconsistently: {sorted(got)}")
        op, args, result = next(iter(got))
        if op in INSERT_OPS:
            inserted[int(args)] += 1
        elif result != "empty":
            removed[int(result)] += 1
    for key in results:
        if key not in invoked:
            rep.fail(f"response without invocation for {key}")
    present = Counter(final)
    for v, n in inserted.items():
        if n != 1:
            rep.fail(f"value {v} inserted {n} times")
    seen = removed + present
    for v, n in seen.items():
        if n != 1:
            rep.fail(f"value {v:#x} observed {n} times (removed {removed[v]}, present {present[v]})")
        if v not in inserted:
            rep.fail(f"value {v:#x} removed or present but never inserted")
    for v in inserted:
        if v not in seen:
            rep.fail(f"value {v:#x} lost")
    return rep


def verify_no_double_free(events: Iterable[Event]) -> Report:
    """No block is freed twice without being retired again in between."""
    rep = Report()
    armed: dict = {}
    for ev in events:
        if ev.kind == RETIRE:
            armed[ev.args] = True
        elif ev.kind == FREE:
            if not armed.get(ev.args, False):
                rep.fail(f"block {ev.args} freed without a pending retirement")
            armed[ev.args] = False
    return rep


# ---------------------------------------------------------------------- #
# linearizability
# ---------------------------------------------------------------------- #


@dataclass(frozen=True)
class Op:
    tid: int
    name: str
    arg: Optional[int]
    result: Optional[int]
    inv: int
    res: int


def history_from_log(events: Iterable[Event]) -> list[Op]:
    """Completed operations with crash events stripped.

    An operation's interval runs from its invocation to its last response,
    whichever boot that response happened in.
    """
    inv: dict = {}
    res: dict = {}
    for ev in events:
        key = (ev.tid, ev.seq)
        if ev.kind == INV:
            inv[key] = ev
        elif ev.kind == RES:
            res[key] = ev
    ops = []
    for key, a in inv.items():
        b = res.get(key)
        if b is None:
            continue
        arg = int(b.args) if b.args else None
        result = None if b.result in ("ok", "") else (-1 if b.result == "empty" else int(b.result))
        ops.append(Op(a.tid, a.op, arg, result, a.ts, b.ts))
    return sorted(ops, key=lambda o: o.inv)


def _apply(kind: str, state: tuple, op: Op) -> Optional[tuple]:
    """Apply ``op`` to a sequential queue or stack; None if the result disagrees."""
    if op.name in INSERT_OPS:
        return state + (op.arg,)
    if not state:
        return state if op.result == -1 else None
    if kind == "queue":
        return state[1:] if op.result == state[0] else None
    return state[:-1] if op.result == state[-1] else None


def verify_linearizable(ops: list[Op], kind: str = "queue", initial: tuple = ()) -> bool:
    """Brute-force search for a legal sequential order respecting real time."""
    n = len(ops)
    if n > 12:
        raise ValueError("history too long for brute force")
    seen: set = set()

    def search(done: int, state: tuple) -> bool:
        if done == (1 << n) - 1:
            return True
        if (done, state) in seen:
            return False
        seen.add((done, state))
        # an op may go next only if no pending op responded before it began
        horizon = min(ops[i].res for i in range(n) if not done >> i & 1)
        for i in range(n):
            if done >> i & 1 or ops[i].inv > horizon:
                continue
            nxt = _apply(kind, state, ops[i])
            if nxt is not None and search(done | 1 << i, nxt):
                return True
        return False

    return search(0, tuple(initial))


# ---------------------------------------------------------------------- #
# HELP invariant oracle
# ---------------------------------------------------------------------- #


class _Instance:
    __slots__ = ("tid", "parity", "t_prev", "helped", "stamped")

    def __init__(self, tid, parity, t_prev):
        self.tid = tid
        self.parity = parity
        self.t_prev = t_prev
        self.helped = False
        self.stamped = False


class HelpOracle:
    """Ground truth for the HELP invariant, fed by the algorithm's trace events.

    For the latest CAS instance ``n`` of each thread, with parity ``p_n`` and
    previous own timestamp ``t_{n-1}``, checks
    ``t_{n-1} < HELP[p_n][tid]`` iff some helper helped instance ``n``.
    Instances are attributed by the exact annotated word a helper saw.  A
    full-system crash forgets all instances: HELP raises whose fence had not
    run yet may be lost with the crash.
    """

    def __init__(self):
        self.rt = None
        self.current: dict = {}
        self.by_word: dict = {}
        self.checks = 0
        self.helps = 0
        self.unattributed = 0
        self.violations: list = []

    def bind(self, rt) -> None:
        self.rt = rt

    def __call__(self, kind: str, *args):
        if kind == "cas_first":
            tid, parity, loc, word = args
            inst = _Instance(tid, parity, self.rt.arrays.own[tid] & TS_MASK)
            self.current[tid] = inst
            self.by_word[(loc, word)] = inst
        elif kind == "cas_ts":
            inst = self.current.get(args[0])
            if inst is not None:
                inst.stamped = True
        elif kind == "help_seen":
            tid, parity, loc, word = args
            return self.by_word.get((loc, word))
        elif kind == "help":
            tid, parity, t_cur, seen = args
            self.helps += 1
            if seen is None or seen.tid != tid or seen.parity != parity:
                self.unattributed += 1
            else:
                seen.helped = True
        return None

    def check(self) -> list:
        arrays = self.rt.arrays
        out = []
        for tid, inst in self.current.items():
            self.checks += 1
            raised = inst.t_prev < arrays.help_load(inst.parity, tid)
            if raised != inst.helped:
                msg = (f"tid {tid} parity {inst.parity}: t_prev={inst.t_prev} "
                       f"HELP={arrays.help_load(inst.parity, tid)} helped={inst.helped}")
                out.append(msg)
        self.violations.extend(out)
        return out

    def on_crash(self) -> None:
        self.current.clear()
        self.by_word.clear()


# ---------------------------------------------------------------------- #
# use-after-free sweep
# ---------------------------------------------------------------------- #


def uaf_sweep(system) -> list:
    """Pointers held by the structure or by live mementos that target freed blocks."""
    ds = system.ds
    alloc = system.alloc
    bad = []

    def check(where: str, h: int) -> None:
        if h and not alloc.is_allocated(h):
            bad.append(f"{where} refers to freed block {h:#x}")

    for off in ds.locations():
        check(f"root word {off:#x}", ds.load_link(off))
    try:
        nodes = ds.nodes()
    except CorruptionError as exc:
        bad.append(f"traversal failed: {exc}")
        nodes = []
    for n in nodes:
        check("reachable node", n)
    if isinstance(ds, MsqIndel):
        pool = system.pool
        for n in nodes[:1]:
            h = n
            while h and alloc.is_allocated(h) and pool.load_word(h + REPL):
                h = pool.load_word(h + REPL) & OFFSET_MASK
                check("replacement of head", h)
    for tid in system.active_tids():
        rec = system.record(tid)
        for h in system.memento(tid, rec.kind).handles():
            check(f"memento of tid {tid}", h)
    return bad
