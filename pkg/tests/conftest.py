import numpy as np
import pytest

from dansnr import numcore as nc


@pytest.fixture(autouse=True, scope="session")
def _trap_non_finite():
    # every op checks its output for NaN/Inf while the suite runs
    old = nc.debug_enabled()
    nc.set_debug(True)
    yield
    nc.set_debug(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
