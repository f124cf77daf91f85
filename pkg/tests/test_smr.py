import pytest

from memento import probe
from memento.dcas import CasMemento
from memento.harness.scenarios import unpin_window
from memento.pmem import CrashModel, PmemAllocator, PmemPool, PoolUsageError
from memento.runtime import Runtime
from memento.smr import GRACE, Reclaimer, RetireError, RootRecord


@pytest.fixture
def smr(pool):
    alloc = PmemAllocator(pool)
    freed = []
    alloc_free = alloc.free

    def free(b):
        freed.append(b)
        alloc_free(b)
    alloc.free = free
    r = Reclaimer(pool, alloc)
    r.freed = freed
    return r


def block(smr):
    b = smr.alloc.alloc(24)
    smr.alloc.publish(b)
    return b


def test_empty_section_frees_nothing(smr):
    for _ in range(5):
        smr.unpin(smr.pin(1))
    assert smr.freed == [] and smr.pending() == 0


def test_retired_block_freed_after_grace(smr):
    b = block(smr)
    cs = smr.pin(1)
    smr.retire(cs, b)
    smr.unpin(cs)
    for _ in range(GRACE):
        smr.unpin(smr.pin(1))
    assert smr.freed == [b]


def test_duplicate_retire_frees_once(smr):
    b = block(smr)
    cs = smr.pin(1)
    smr.retire(cs, b)
    smr.retire(cs, b)
    smr.unpin(cs)
    assert smr.drain() + len(smr.freed) >= 1
    assert smr.freed == [b]


def test_deferred_flushes_merge_per_line(smr, pool):
    cs = smr.pin(1)
    off = pool.heap_start
    for i in range(5):
        pool.store_word(off + 8 * i, i + 1)
        smr.defer_flush(cs, off + 8 * i)
    before = pool.stats.flush
    smr.unpin(cs)
    assert pool.stats.flush == before + 1
    assert pool.persisted_word(off + 32) == 5


def test_pinned_reader_blocks_reclamation(smr):
    b = block(smr)
    reader = smr.pin(2)
    cs = smr.pin(1)
    smr.retire(cs, b)
    smr.unpin(cs)
    for _ in range(5):
        smr.unpin(smr.pin(1))
    assert smr.freed == []
    smr.unpin(reader)
    for _ in range(GRACE + 1):
        smr.unpin(smr.pin(1))
    assert smr.freed == [b]


def test_revive_hands_back_open_section(smr):
    b = block(smr)
    cs = smr.pin(1)
    smr.retire(cs, b)
    # the thread dies here; its replacement continues the same section
    again = smr.revive(1)
    assert again is cs
    smr.retire(again, b)
    smr.unpin(again)
    smr.unpin(again)  # a repeated unpin after a crash is harmless
    smr.drain()
    assert smr.freed == [b]
    assert smr.revive(1) is not cs


def test_double_pin_and_bad_retire(smr):
    cs = smr.pin(1)
    with pytest.raises(PoolUsageError):
        smr.pin(1)
    with pytest.raises(RetireError):
        smr.retire(cs, smr.pool.heap_start + 4096)
    with pytest.raises(PoolUsageError):
        smr.drain()


def test_root_record_clear_is_idempotent(rt):
    rec = RootRecord(rt, 3)
    mems = [CasMemento(rt, rt.pool.heap_start + 8 * i) for i in range(3)]
    for m in mems:
        rt.pool.store_word(m.off, 77)
    rec.begin(kind=2, seq=41, arg=9)
    assert rec.active and rec.kind == 2 and rec.seq == 41 and rec.arg == 9
    rec.clear(mems)
    assert not rec.active and not rec.clearing
    assert all(rt.pool.persisted_word(m.off) == 0 for m in mems)
    rec.finish_clear(mems)
    assert not rec.active and rec.seq == 41


def test_interrupted_clear_resumes_after_crash(rt):
    pool = rt.pool
    rec = RootRecord(rt, 3)
    mem = CasMemento(rt, pool.heap_start)
    pool.store_word(mem.off, 77)
    pool.flush(mem.off)
    rec.begin(kind=1, seq=5, arg=0)
    seen = []

    def hook(label):
        if label == "smr.clear.flag":
            seen.extend(pool.crash(CrashModel.enumerate()))
    probe.set_hook(hook)
    rec.clear([mem])
    probe.set_hook(None)
    assert seen
    for image in seen:
        rt2 = Runtime(PmemPool.from_image(image))
        rec2 = RootRecord(rt2, 3)
        mem2 = CasMemento(rt2, mem.off)
        assert rec2.clearing and rec2.active
        rec2.finish_clear([mem2])
        assert not rec2.clearing and not rec2.active and mem2.load() == 0


@pytest.mark.parametrize("ds", ["msq-indel", "msq-vol"])
def test_unpin_window(ds):
    assert unpin_window(ds).ok
    bad = unpin_window(ds, bug=True)
    assert not bad.ok
    assert any("freed block" in p for p in bad.problems)
