import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from daba.io import synthesize_problem

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_synthetic():
    return synthesize_problem(num_cameras=8, num_points=60, seed=3, pixel_noise=1e-3)


@pytest.fixture(scope="session")
def noiseless_synthetic():
    return synthesize_problem(num_cameras=8, num_points=60, seed=4)


# ---------------------------------------------------------------------------
# One summary line per acceptance criterion

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")
