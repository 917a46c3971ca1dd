import numpy as np
import pytest

from flowcal.model import SpeedFlowParams

# posterior-mean curve reported for the SP-280 km 51.9 east sensor
SP280 = SpeedFlowParams(u_f=109.6, q_c=2254.0, bp=383.0, alpha=1.45, k_c=26.0)


@pytest.fixture
def sp280():
    return SP280


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[key])
