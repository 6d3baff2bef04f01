import numpy as np
import pytest
from hypothesis import settings

from fedready.numcore import Rng
from fedready.probe import ProbeSpec

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_spec():
    """Two conv layers with 4 filters in total: cheap enough for finite differences."""
    return ProbeSpec(input_channels=2, input_side=8, conv_layers=((2, 3), (2, 3)), head_classes=3)


@pytest.fixture
def np_rng():
    return np.random.default_rng(7)
