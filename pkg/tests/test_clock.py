import pytest
from hypothesis import given, strategies as st

from memento.clock import (FAIL_BIT, TS_MASK, Clock, ClockOverflowError, GlobalArrays, calibrate,
                           decode_ts, encode_ts)
from memento.pmem import PmemPool, PoolUsageError


@given(st.integers(0, 1), st.booleans(), st.integers(0, TS_MASK))
def test_ts_roundtrip(parity, fail, ts):
    assert decode_ts(encode_ts(parity, ts, fail)) == (parity, fail, ts)


def test_clock_strictly_increases():
    c = Clock()
    a, b, c2 = c.now(), c.now(), c.now()
    assert a < b < c2


@given(st.integers(0, 2**40), st.integers(1, 1000))
def test_calibrated_clock_exceeds_checkpoints(t_max, raw_start):
    c = Clock(raw_start).calibrate(t_max)
    assert c.now() > t_max


def test_calibrate_reads_help_and_mementos():
    pool = PmemPool.create(1 << 16, nthreads=4)
    arrays = GlobalArrays(pool)
    assert arrays.help_cas(1, 2, 0, 500)
    clock = calibrate(Clock(), pool, [encode_ts(1, 300), encode_ts(0, 7, fail=True)])
    assert clock.now() > 500
    clock = calibrate(Clock(), pool, [encode_ts(1, 900)])
    assert clock.now() > 900


def test_clock_overflow():
    c = Clock().calibrate(TS_MASK - 1)
    assert c.now() == TS_MASK
    with pytest.raises(ClockOverflowError):
        c.now()


def test_init_own_takes_latest_and_drops_fail():
    arrays = GlobalArrays(PmemPool.create(1 << 16, nthreads=4))
    own = arrays.init_own(1, [encode_ts(1, 10), encode_ts(0, 30, fail=True), encode_ts(0, 20)])
    assert own == encode_ts(0, 30) and not own & FAIL_BIT
    with pytest.raises(PoolUsageError):
        arrays.init_own(4, [])


def test_help_cas_only_from_expected():
    arrays = GlobalArrays(PmemPool.create(1 << 16, nthreads=4))
    assert arrays.help_cas(0, 1, 0, 5)
    assert not arrays.help_cas(0, 1, 0, 6)
    assert arrays.help_load(0, 1) == 5 and arrays.help_load(1, 1) == 0
