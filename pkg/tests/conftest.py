import pytest

_CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance check: ``criterion(number, passed, detail)``."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(line)
