import numpy as np
import pytest

from abds.diffusion import make_schedule
from abds.gmm import GmmDistribution


@pytest.fixture(scope="session")
def sched():
    """Default desk-scale schedule."""
    return make_schedule("linear", 200, 1e-4, 0.05)


@pytest.fixture(scope="session")
def sched_strong():
    """Schedule whose terminal signal level is below 1e-8."""
    return make_schedule("linear", 400, 1e-4, 0.09, terminal_threshold=1e-8)


@pytest.fixture(scope="session")
def sched_gentle():
    """Finer schedule where reverse-chain discretization bias is negligible."""
    return make_schedule("linear", 600, 1e-4, 0.02)


@pytest.fixture(scope="session")
def gmm_std_1d():
    return GmmDistribution([1.0], [[0.0]], [[1.0]])


@pytest.fixture(scope="session")
def gmm_two_1d():
    return GmmDistribution([0.4, 0.6], [[-1.2], [1.0]], [[0.4], [0.7]])


@pytest.fixture(scope="session")
def gmm_two_2d():
    return GmmDistribution(
        [0.5, 0.5], [[-1.5, 0.0], [1.5, 0.0]], [[0.4, 0.5], [0.5, 0.3]]
    )
