import sys

import numpy as np
import pytest

from decbf.certificates import init_pair
from decbf.dynamics import DynamicsKind
from decbf.world import ScenarioConfig, load_preset


@pytest.fixture(scope="session")
def kind2d():
    return DynamicsKind.double_integrator_2d()


@pytest.fixture(scope="session")
def kind3d():
    return DynamicsKind.drone_3d()


@pytest.fixture(scope="session")
def pair2d(kind2d):
    return init_pair(kind2d, seed=3)


@pytest.fixture(scope="session")
def pair3d(kind3d):
    return init_pair(kind3d, seed=4)


@pytest.fixture(scope="session")
def nav():
    return load_preset("navigation2d")


@pytest.fixture(scope="session")
def headon():
    return load_preset("headon2d")


@pytest.fixture
def open_arena(kind2d):
    """Obstacle-free square arena for hand-built layouts."""
    return ScenarioConfig(name="open", dynamics=kind2d, n_agents=4, arena_low=[0.0, 0.0],
                          arena_high=[10.0, 10.0], obstacles=[], episode_steps=50)


def random_obs(rng, n, k, scale=1.0):
    rel = rng.normal(0.0, scale, size=(k, n))
    kinds = rng.integers(0, 2, size=k).astype(np.int8)
    return rel, kinds


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
