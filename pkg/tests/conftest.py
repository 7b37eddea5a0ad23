import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record a one-line verdict per acceptance criterion; printed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {title} | {detail}"
        _LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
