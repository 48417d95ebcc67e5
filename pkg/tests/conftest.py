import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vpblab.collision_ops import coercivity_estimate, make_backend
from vpblab.velocity_space import build_grid

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def grid3():
    return build_grid(3, 8)


@pytest.fixture(scope="session")
def grid1():
    return build_grid(1, 12)


@pytest.fixture(scope="session")
def bgk3(grid3):
    return make_backend("bgk_surrogate", grid3)


@pytest.fixture(scope="session")
def bgk1(grid1):
    return make_backend("bgk_surrogate", grid1)


@pytest.fixture(scope="session")
def hard_sphere():
    """Order-12 hard-sphere backend with a measured coercivity constant (about half a minute)."""
    be = make_backend("hard_sphere", build_grid(3, 12))
    coercivity_estimate(be)
    return be


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
