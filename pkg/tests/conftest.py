import numpy as np
import pytest
from hypothesis import settings

from covbal.case import load_desk_case
from covbal.cosim import reduce_linearized, reduce_nonlinear, run_cosim
from covbal.gramians import scheme_for_profile
from covbal.integrate import EventSchedule

settings.register_profile("covbal", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("covbal")

DESK_FAULT = EventSchedule(0.1, 0.15, 0.2, "4-6", 6)
REFERENCE = "G1"


@pytest.fixture(scope="session")
def desk():
    return load_desk_case()


@pytest.fixture(scope="session")
def desk_fault():
    return DESK_FAULT


@pytest.fixture(scope="session")
def desk_nm(desk):
    """Empirical-covariance reduction of the desk external area (LS profile)."""
    return reduce_nonlinear(desk, scheme_for_profile("LS"))


@pytest.fixture(scope="session")
def desk_lm(desk):
    return reduce_linearized(desk)


@pytest.fixture(scope="session")
def faulted_refs(desk):
    """UnPartitioned and Partitioned-Unreduced runs of the faulted desk case."""
    return {m: run_cosim(desk, m, events=DESK_FAULT)
            for m in ("UnPartitioned", "Partitioned-Unreduced")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` records a pass/fail line for the summary."""
    def record(n, title, ok, detail=""):
        _CRITERIA[n] = (title, bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
