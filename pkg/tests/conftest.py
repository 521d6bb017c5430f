import sys

import numpy as np
import pytest

from densereg.model import make_toy_model
from densereg.synth import RigSpec, make_scene


@pytest.fixture(scope="session")
def toy():
    return make_toy_model(0, n_v=162, n_beta=6, n_psi=4, S=3)


@pytest.fixture(scope="session")
def toy642():
    return make_toy_model(0)


@pytest.fixture(scope="session")
def small_scene(toy):
    return make_scene(toy, RigSpec(n_views=4, resolution=(48, 48)), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
