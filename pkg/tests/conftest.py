import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Call with (number, title, passed, detail); records the line and asserts."""

    def record(number, title, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        if detail:
            line += f" :: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
