import pytest

from gsdest.casestudy import MUSEC_DATA, musec_design
from gsdest.estimators import observe_binary


@pytest.fixture(scope="session")
def musec():
    return musec_design()


@pytest.fixture(scope="session")
def musec_outcome(musec):
    return observe_binary(MUSEC_DATA, musec)


@pytest.fixture(scope="session")
def musec_data():
    return MUSEC_DATA


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, then fail the test if the check failed."""
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        _CRITERIA[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
