import math

import numpy as np
import pytest
from hypothesis import settings

from heatnet.network import NetworkSpec, PotentialSpec, Thermostat
from heatnet.thermostat import CouplingSpec

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

SQRT_PI = math.sqrt(math.pi)

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def quartic_single():
    """``q^2/2 + q^4/4`` with one unit gauss bath."""
    return NetworkSpec(
        ("x",), (), {"x": PotentialSpec.polynomial((0, 0, 0.5, 0, 0.25))}, {},
        (Thermostat("b", "x", CouplingSpec()),),
    )


@pytest.fixture
def chain3_net():
    pot = PotentialSpec.polynomial((0, 0, 0.25, 0, 0.25))
    mid = PotentialSpec.polynomial((0, 0, 0.05, 0, 0.25))
    c = CouplingSpec("gauss", 0.6, 1.0)
    return NetworkSpec(
        (1, 2, 3), ((1, 2), (2, 3)), {1: pot, 2: mid, 3: pot},
        {(1, 2): PotentialSpec.harmonic(0.25), (2, 3): PotentialSpec.harmonic(0.25)},
        (Thermostat("L", 1, c), Thermostat("R", 3, c)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
