import pytest

from twinfs import harness


@pytest.fixture
def system():
    """Small full-stack system over the loopback transport."""
    sys = harness.build_system(total_blocks=256, inode_count=32)
    yield sys
    if sys.session is not None:
        sys.session.close()


@pytest.fixture
def runner(system):
    return harness.WorkloadRunner(system, seed=0)
