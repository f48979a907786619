import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import LOG  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not LOG.parts:
        return
    terminalreporter.section("acceptance criteria")
    for line in LOG.lines():
        terminalreporter.write_line(line)
