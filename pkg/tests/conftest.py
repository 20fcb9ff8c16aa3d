import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA: dict[int, str] = {}


def report(number: int, passed: bool, text: str) -> bool:
    """Record (and print) one acceptance line; returns ``passed`` for use in assertions."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {text}"
    CRITERIA[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[number])
