import itertools

import pytest
from hypothesis import given, strategies as st

from memento.pmem import (LINE, CrashExplosionError, CrashModel, DoubleFreeError, PmemAllocator,
                          PmemPool, PoolConfigError, PoolUsageError, UnrecoverablePoolError)


def lines_of(pool, n):
    return [pool.heap_start + i * LINE for i in range(n)]


def test_store_is_volatile_until_flushed(pool):
    a = pool.heap_start
    pool.store_word(a, 42)
    assert pool.load_word(a) == 42
    assert pool.persisted_word(a) == 0
    assert pool.crash() is not None
    assert PmemPool.from_image(pool.crash()).load_word(a) == 0


def test_flush_survives_revert_all_dirty(pool):
    a, b = lines_of(pool, 2)
    pool.store_word(a, 1)
    pool.store_word(b, 2)
    pool.flush(a)
    img = PmemPool.from_image(pool.crash(CrashModel.revert_all_dirty()))
    assert (img.load_word(a), img.load_word(b)) == (1, 0)


def test_flush_opt_waits_for_fence(pool):
    a, b = lines_of(pool, 2)
    pool.store_word(a, 7)
    pool.flush_opt(a)
    assert pool.is_dirty(a)
    pool.sfence()
    assert not pool.is_dirty(a)
    pool.store_word(b, 8)
    pool.flush_opt(b)
    # a successful CAS drains pending flush_opt requests too
    assert pool.cas_word(a, 7, 9) == 7
    assert pool.persisted_word(b) == 8


def test_failed_cas_does_not_fence(pool):
    a, b = lines_of(pool, 2)
    pool.store_word(b, 3)
    pool.flush_opt(b)
    assert pool.cas_word(a, 1, 2) == 0
    assert pool.persisted_word(b) == 0


def test_flush_counts_both_kinds(pool):
    a = pool.heap_start
    pool.flush(a)
    pool.flush_opt(a)
    assert pool.stats.flushes == 2


def test_enumerate_with_no_dirty_lines_is_one_image(pool):
    pool.flush_all()
    assert len(list(pool.crash(CrashModel.enumerate()))) == 1


def test_enumerate_yields_every_subset(pool):
    addrs = lines_of(pool, 3)
    for i, a in enumerate(addrs):
        pool.store_word(a, i + 1)
    images = [PmemPool.from_image(img) for img in pool.crash(CrashModel.enumerate())]
    seen = {tuple(p.load_word(a) for a in addrs) for p in images}
    assert seen == set(itertools.product(*[(0, i + 1) for i in range(3)]))
    # enumeration leaves the pool as it was
    assert pool.dirty_lines and pool.load_word(addrs[2]) == 3


def test_enumerate_refuses_explosions(pool):
    for a in lines_of(pool, 13):
        pool.store_word(a, 1)
    with pytest.raises(CrashExplosionError):
        next(iter(pool.crash(CrashModel.enumerate())))


@given(st.lists(st.tuples(st.integers(0, 15), st.integers(1, 2**64 - 1), st.booleans()),
                max_size=30), st.integers(0, 2**32))
def test_crash_images_mix_whole_lines(writes, seed):
    pool = PmemPool.create(1 << 16, nthreads=4)
    base = pool.heap_start
    for line, value, flush in writes:
        pool.store_word(base + line * LINE, value)
        if flush:
            pool.flush(base + line * LINE)
    persisted = {ln: pool.persisted_word(base + ln * LINE) for ln in range(16)}
    current = {ln: pool.load_word(base + ln * LINE) for ln in range(16)}
    img = PmemPool.from_image(pool.crash(CrashModel.per_line_random(seed)))
    for ln in range(16):
        assert img.load_word(base + ln * LINE) in (persisted[ln], current[ln])


def test_file_pool_roundtrip(tmp_path):
    path = tmp_path / "pool"
    pool = PmemPool.create(1 << 16, path, nthreads=4)
    a = pool.heap_start
    pool.store_word(a, 5)
    pool.flush(a)
    pool.store_word(a + LINE, 6)
    pool.crash()
    pool.close()
    again = PmemPool.open(path)
    assert (again.load_word(a), again.load_word(a + LINE)) == (5, 0)
    again.close()
    with pytest.raises(PoolConfigError):
        PmemPool.create(1 << 16, path)


def test_bad_inputs(pool):
    with pytest.raises(PoolUsageError):
        pool.load_word(3)
    with pytest.raises(PoolConfigError):
        PmemPool.create(3000)
    with pytest.raises(UnrecoverablePoolError):
        PmemPool.from_image(b"\0" * (1 << 16))


def test_allocator_reuses_and_rebuilds(pool):
    alloc = PmemAllocator(pool)
    a = alloc.alloc(24)
    b = alloc.alloc(24)
    alloc.publish(a)
    alloc.publish(b)
    alloc.free(a)
    assert not alloc.is_allocated(a) and alloc.is_allocated(b)
    with pytest.raises(DoubleFreeError):
        alloc.free(a)
    assert alloc.alloc(24) == a
    again = PmemAllocator(PmemPool.from_image(pool.crash()))
    # the re-allocation of ``a`` was never published, so after the crash it is free
    assert again.free_handles() == [a]
    assert [h for h, _, used in again.walk() if used] == [b]


@given(st.lists(st.sampled_from(["alloc", "free"]), max_size=40), st.integers(0, 2**16))
def test_allocator_never_double_hands_out(ops, seed):
    import random
    rng = random.Random(seed)
    pool = PmemPool.create(1 << 18, nthreads=4)
    alloc = PmemAllocator(pool)
    live: set = set()
    for op in ops:
        if op == "alloc" or not live:
            h = alloc.alloc(rng.choice((8, 24, 100)))
            alloc.publish(h)
            assert h not in live
            live.add(h)
        else:
            h = rng.choice(sorted(live))
            alloc.free(h)
            live.remove(h)
    rebuilt = PmemAllocator(PmemPool.from_image(pool.crash()))
    assert {h for h, _, used in rebuilt.walk() if used} == live
