import pytest

from transferlab.maps import make_double_tent, make_doubling
from transferlab.statistics import invariant_density
from transferlab.ulam import build_ulam_1d


@pytest.fixture(scope="session")
def tent():
    return make_double_tent(2.1)


@pytest.fixture(scope="session")
def doubling():
    return make_doubling()


@pytest.fixture(scope="session")
def P200(tent):
    return build_ulam_1d(tent, 200)


@pytest.fixture(scope="session")
def P1000(tent):
    return build_ulam_1d(tent, 1000)


@pytest.fixture(scope="session")
def v1000(P1000):
    return invariant_density(P1000, tol=1e-14)


@pytest.fixture(scope="session")
def doubling2():
    """The 2-cell doubling matrix, every entry 1/2."""
    return build_ulam_1d(make_doubling(), 2)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
