from collections import deque

import greenlet
import pytest
from hypothesis import given, settings, strategies as st

from memento import probe
from memento.ds import EMPTY, OP_INSERT, OP_REMOVE
from memento.ds.audit import LOOPS, SUBOPS
from memento.ds.base import NEXT, CorruptionError
from memento.ds.layout import pack
from memento.harness import STRUCTURES, System
from memento.harness.scenarios import structure_window

QUEUES = ("msq-cas", "msq-indel", "msq-vol")
ALL = QUEUES + ("stack",)

ops_strategy = st.lists(st.one_of(st.integers(1, 10**6).map(lambda v: (OP_INSERT, v)),
                                  st.just((OP_REMOVE, 0))), max_size=40)


@pytest.mark.parametrize("ds", ALL)
@settings(max_examples=25)
@given(ops=ops_strategy)
def test_sequential_matches_model(ds, ops):
    system = System.create(ds, 1 << 20, 4)
    model: deque = deque()
    for seq, (op, arg) in enumerate(ops):
        got = system.execute(1 + seq % 3, op, arg, seq)
        if op == OP_INSERT:
            model.append(arg)
            continue
        if not model:
            assert got == EMPTY
        else:
            assert got == (model.popleft() if ds in QUEUES else model.pop())
        assert system.ds.check_invariants() == []
    want = list(model) if ds in QUEUES else list(reversed(model))
    assert system.traverse() == want


@pytest.mark.parametrize("ds", ALL)
def test_enqueue_into_empty_survives_every_crash(ds):
    rep = structure_window(ds, [(1, OP_INSERT, 7)])
    assert rep.ok, rep.problems[:3]
    assert rep.images > 10


@pytest.mark.parametrize("ds", ALL)
def test_dequeue_rerun_returns_same_value(ds):
    rep = structure_window(ds, [(1, OP_REMOVE, 0), (2, OP_REMOVE, 0)], prefill=(5, 6))
    assert rep.ok, rep.problems[:3]


@pytest.mark.parametrize("ds", ALL)
def test_cycle_detected(ds):
    system = System.create(ds, 1 << 20, 4)
    system.ds.prefill([1, 2, 3])
    nodes = system.ds.nodes()
    system.pool.store_word(nodes[-1] + NEXT, nodes[-2])
    with pytest.raises(CorruptionError):
        system.ds.nodes()


@pytest.mark.parametrize("ds", ALL)
def test_audit_fields_are_distinct_and_disjoint(ds):
    cls = STRUCTURES[ds]
    for op, sites in SUBOPS[ds].items():
        fields = {f.name: f for f in cls.MEMENTOS[op]}
        named = [f for f in sites.values() if f is not None]
        assert len(named) == len(set(named))
        assert set(named) <= set(fields)
        offsets, _ = pack(cls.MEMENTOS[op])
        spans = sorted((offsets[n], offsets[n] + fields[n].size) for n in fields)
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
        for phi in LOOPS[ds][op].values():
            assert phi in fields


@pytest.mark.parametrize("ds", ALL)
def test_interleaved_inserters(ds):
    """Two workers switch at every labeled point; both values land once."""
    system = System.create(ds, 1 << 20, 4)
    workers = {}

    def body(tid, v):
        return lambda: system.execute(tid, OP_INSERT, v, tid)
    for tid, v in ((1, 11), (2, 22)):
        workers[tid] = greenlet.greenlet(body(tid, v))

    def hook(label):
        me = greenlet.getcurrent()
        other = workers[2] if me is workers[1] else workers[1]
        if not other.dead and other is not me:
            other.switch()
    probe.set_hook(hook)
    while not all(g.dead for g in workers.values()):
        for g in workers.values():
            if not g.dead:
                g.switch()
    probe.set_hook(None)
    assert sorted(system.traverse()) == [11, 22]
    assert system.ds.check_invariants() == []
