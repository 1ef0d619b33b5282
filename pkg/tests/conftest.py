import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; it is echoed now and again in the summary."""
    def record(number, title, ok, detail, elapsed):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number} {title}: {detail} ({elapsed:.2f} s)"
        _LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in _LINES:
            terminalreporter.write_line(line)
