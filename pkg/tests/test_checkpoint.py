import pytest
from hypothesis import given, strategies as st

from memento.checkpoint import CheckpointSlots
from memento.clock import calibrate
from memento.harness.scenarios import checkpoint_window
from memento.pmem import PmemPool
from memento.runtime import Runtime

words = st.integers(0, 2**64 - 1)


def reboot(pool, slots_off, nwords):
    p2 = PmemPool.from_image(pool.crash())
    rt2 = Runtime(p2)
    slots = CheckpointSlots(rt2, slots_off, nwords)
    calibrate(rt2.clock, p2, [slots.max_timestamp()])
    return slots


def test_fresh_checkpoint_stores_value(rt):
    s = CheckpointSlots(rt, rt.pool.heap_start)
    assert s.checkpoint(5, 1) == (5, False)
    assert s.peek()[1] == 5


def test_completed_checkpoint_replays_after_crash(rt):
    off = rt.pool.heap_start
    CheckpointSlots(rt, off, 2).checkpoint((1, 2), 1)
    again = reboot(rt.pool, off, 2)
    got = again.checkpoint(lambda: pytest.fail("replay must not recompute"), 1)
    assert got == ((1, 2), True)


def test_replay_is_once_per_execution(rt):
    off = rt.pool.heap_start
    CheckpointSlots(rt, off).checkpoint(9, 1)
    again = reboot(rt.pool, off, 1)
    assert again.checkpoint(1, 1).detected
    # a later checkpoint in the same execution is fresh work
    other = CheckpointSlots(again.rt, off + 64)
    assert not other.checkpoint(3, 1).detected


def test_latest_of_two_wins(rt):
    off = rt.pool.heap_start
    s = CheckpointSlots(rt, off, 3)
    s.checkpoint((1, 1, 1), 1)
    s.checkpoint((2, 2, 2), 1)
    assert reboot(rt.pool, off, 3).checkpoint((0, 0, 0), 1).value == (2, 2, 2)


def test_single_line_pair_costs_one_flush(rt):
    s = CheckpointSlots(rt, rt.pool.heap_start, 2)
    assert s.single_line
    for i in range(5):
        before = rt.pool.stats.flushes
        s.checkpoint((i, i), 1)
        assert rt.pool.stats.flushes - before == 1


def test_clear_makes_memento_fresh(rt):
    off = rt.pool.heap_start
    s = CheckpointSlots(rt, off)
    s.checkpoint(4, 1)
    s.clear()
    assert s.peek() is None
    assert not reboot(rt.pool, off, 1).checkpoint(6, 1).detected


def test_wrong_arity(rt):
    with pytest.raises(ValueError):
        CheckpointSlots(rt, rt.pool.heap_start, 2).checkpoint((1,), 1)


@given(st.lists(st.tuples(words, words), min_size=1, max_size=6))
def test_replays_last_value(values):
    pool = PmemPool.create(1 << 16, nthreads=4)
    rt = Runtime(pool)
    off = pool.heap_start + 64 * 3
    s = CheckpointSlots(rt, off, 2)
    for v in values:
        s.checkpoint(v, 1)
    assert reboot(pool, off, 2).checkpoint((0, 0), 1) == (values[-1], True)


@pytest.mark.parametrize("nwords", [1, 8])
def test_checkpoint_never_torn(nwords):
    rep = checkpoint_window(nwords)
    assert rep.ok, rep.problems
    assert rep.images > len(rep.verdicts)
