import pytest

_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line; they are printed together at the end of the session."""

    def record(ok: bool, text: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {text}"
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
