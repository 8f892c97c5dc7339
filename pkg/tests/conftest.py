import pytest

from ktie.geometry import CONFORMAL, EUCLIDEAN, make_domain
from ktie.grid import PhaseGrid


@pytest.fixture(scope="session")
def disk():
    return make_domain(EUCLIDEAN, 1.0)


@pytest.fixture(scope="session")
def cdisk():
    return make_domain(CONFORMAL, 1.0)


@pytest.fixture(scope="session")
def grid(disk):
    """Coarse Euclidean grid used by most unit tests."""
    return PhaseGrid(disk, 0.1, 8, 0.05, 4.0)


@pytest.fixture(scope="session")
def cgrid(cdisk):
    return PhaseGrid(cdisk, 0.125, 8, 0.0625, 5.0)


ACCEPTANCE_COUNT = 11


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """Record one acceptance verdict; the terminal summary prints all of them."""

    def record(number: int, title: str, passed: bool, detail: str):
        line = f"[{number:2d}] {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        request.config._acceptance[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    got = config._acceptance
    if not got:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        terminalreporter.write_line(got.get(n, f"[{n:2d}] ----  not reported (deselected, or the check raised first)"))
