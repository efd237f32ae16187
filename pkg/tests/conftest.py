import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_criteria: list[str] = []


@pytest.fixture
def criterion():
    """Report one acceptance criterion; call before asserting so failures are listed too."""

    def report(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{title}]: {'PASS' if passed else 'FAIL'} ({detail})"
        _criteria.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
