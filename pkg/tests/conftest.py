import numpy as np
import pytest

from _helpers import scalar_system
from sinkhorn_drc.system import build_stacked


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def scalar2():
    spec = scalar_system(2, a=2.0)
    return spec, build_stacked(spec)


def pytest_terminal_summary(terminalreporter):
    from _helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
