import pytest
from hypothesis import HealthCheck, settings

from memento import probe
from memento.pmem import PmemPool
from memento.runtime import Runtime

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _no_leftover_hooks():
    yield
    probe.set_hook(None)
    probe.set_tracer(None)


@pytest.fixture
def pool():
    return PmemPool.create(1 << 16, nthreads=8)


@pytest.fixture
def rt(pool):
    return Runtime(pool)
