import greenlet
import pytest
from hypothesis import given, strategies as st

from memento import probe
from memento.ds.base import REPL
from memento.harness.scenarios import insdel_delete_window, insdel_insert_window
from memento.insdel import (PERSIST, InsDelLocation, decode, decode_repl, encode, encode_repl)
from memento.pmem import LINE


class Section:
    def __init__(self):
        self.retired, self.deferred = [], []

    def retire(self, block):
        self.retired.append(block)

    def defer_flush(self, off):
        self.deferred.append(off)


def blocks(pool, n):
    return [pool.heap_start + LINE * (2 + 2 * i) for i in range(n)]


@given(st.booleans(), st.integers(0, 2**45 - 1), st.integers(0, 1023))
def test_word_roundtrip(persist, offset, tag):
    assert decode(encode(persist, offset, tag)) == (persist, tag, offset)


@given(st.integers(1, 511), st.integers(0, 2**45 - 1), st.integers(0, 1023))
def test_repl_roundtrip(tid, offset, tag):
    assert decode_repl(encode_repl(tid, offset | tag << 45)) == (tid, tag, offset)


def test_insert_into_null(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    (b,) = blocks(rt.pool, 1)
    assert loc.insert(b, None).ok
    assert rt.pool.load_word(loc.off) == b
    assert rt.pool.persisted_word(loc.off) & ~PERSIST == b


def test_insert_into_occupied_fails(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    a, b = blocks(rt.pool, 2)
    loc.init(a)
    r = loc.insert(b, None)
    assert not r.ok and not r.spurious and r.value == a


def test_load_clear_bit_returns_immediately(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    loc.init(0x1000)
    ticks = []
    probe.set_hook(ticks.append)
    assert loc.load() == 0x1000 and not ticks


def _stalled_inserter(rt, loc, b):
    def hook(label):
        if label == "insdel.insert.L21" and greenlet.getcurrent() is g:
            g.parent.switch()
    g = greenlet.greenlet(lambda: loc.insert(b, None))
    probe.set_hook(hook)
    g.switch()
    return g


def test_load_flushes_for_a_stalled_writer(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    (b,) = blocks(rt.pool, 1)
    g = _stalled_inserter(rt, loc, b)
    assert rt.pool.load_word(loc.off) & PERSIST
    rt.patience = 0
    assert loc.load() == b
    assert rt.pool.persisted_word(loc.off) & ~PERSIST == b
    assert g.switch().ok


def test_load_waits_for_a_writer_within_patience(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    (b,) = blocks(rt.pool, 1)
    g = _stalled_inserter(rt, loc, b)
    rt.patience = 10**9
    seen = []

    def hook(label):
        seen.append(label)
        if label == "insdel.load.L10" and len(seen) == 2:
            g.switch()
    probe.set_hook(hook)
    flushes = rt.pool.stats.flush
    assert loc.load() == b
    # the writer's own flush, nothing from the reader
    assert rt.pool.stats.flush == flushes + 1
    assert "insdel.load.L11" not in seen


def test_sole_deleter(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    a, b = blocks(rt.pool, 2)
    loc.init(a)
    cs = Section()
    r = loc.delete(a, b, 1, cs=cs)
    assert r.ok and r.value == a
    assert loc.load() == b and cs.retired == [a] and cs.deferred == [loc.off]
    assert decode_repl(rt.pool.load_word(a + REPL))[0] == 1


def test_race_has_one_winner(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    a, b, c = blocks(rt.pool, 3)
    loc.init(a)
    # thread 2 commits and stalls before applying; thread 1 then loses
    def hook(label):
        if label == "insdel.delete.L34" and greenlet.getcurrent() is g:
            g.parent.switch()
    g = greenlet.greenlet(lambda: loc.delete(a, c, 2, cs=Section()))
    probe.set_hook(hook)
    g.switch()
    rt.patience = 0
    lost = loc.delete(a, b, 1, cs=Section())
    assert not lost.ok and lost.value == c
    assert g.switch().ok
    assert loc.load() == c
    assert decode_repl(rt.pool.load_word(a + REPL))[0] == 2


def test_load_help_early_outs(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    (a,) = blocks(rt.pool, 1)
    assert loc.load_help(0) == 0
    assert loc.load_help(a) == a


def test_helper_applies_committed_delete(rt):
    loc = InsDelLocation(rt, rt.pool.heap_start, REPL)
    a, b = blocks(rt.pool, 2)
    loc.init(a)
    rt.pool.store_word(a + REPL, encode_repl(3, b))
    rt.patience = 0
    assert loc.load_help(a) == b
    assert rt.pool.load_word(loc.off) == b and rt.help_count == 1


def test_delete_window_recovers():
    rep = insdel_delete_window()
    assert rep.ok, rep.problems
    assert probe.coverage["insdel.delete.rec.case1"] and probe.coverage["insdel.delete.rec.case2"]


@pytest.mark.parametrize("rival", [False, True])
def test_whole_delete_window(rival):
    rep = insdel_delete_window(None, None, rival=rival)
    assert rep.ok, rep.problems


def test_insert_window_inserts_once():
    rep = insdel_insert_window()
    assert rep.ok, rep.problems
    assert probe.coverage["insdel.insert.rec.spurious"] and probe.coverage["insdel.insert.rec.ok"]
