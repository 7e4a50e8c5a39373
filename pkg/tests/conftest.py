import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from protopnetpp import diffcore as dc

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with dc.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one summary line per acceptance criterion, written by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
