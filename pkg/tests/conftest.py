import pytest

_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """``record(number, passed, detail)`` for the acceptance summary lines."""

    def record(number, passed, detail=""):
        _CRITERIA[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
