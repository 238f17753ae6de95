import numpy as np
import pytest

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240229)


@pytest.fixture
def criterion():
    """``criterion(n, name, passed, detail)`` records a result line for the summary."""
    def record(n, name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {n:<3} {name}: {detail}"
        _CRITERIA[str(n)] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
        terminalreporter.write_line(_CRITERIA[n])
