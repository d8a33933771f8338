from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from memsci.fixtures import random_integrals
from memsci.hamiltonian import build_tables

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_system():
    ints, space = random_integrals(5, 10, 4)
    return ints, space, build_tables(ints, space)


@pytest.fixture(scope="session")
def odd_system():
    ints, space = random_integrals(6, 12, 5, density=0.5)
    return ints, space, build_tables(ints, space)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", {}) if mod else {}
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
