import pytest

from sbclab.invariant_measure import build_ulam, stationary_density
from sbclab.map_core import MapParams


@pytest.fixture(scope="session")
def density_half():
    """Geometric-grid density for alpha = 0.5, m = 2^12."""
    return stationary_density(build_ulam(MapParams(0.5), 2**12))


CRITERIA: dict = {}


@pytest.fixture
def record():
    """Store one acceptance line: ``record(number, passed, detail)``."""

    def _record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
