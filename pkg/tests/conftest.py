import pytest

_RESULTS = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, title, ok, detail)``, then assert."""

    def record(number, title, ok, detail=""):
        line = f"ACCEPTANCE {number} {title}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
        _RESULTS.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_RESULTS):
        terminalreporter.write_line(line)
