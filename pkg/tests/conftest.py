import pytest

from latexblend.config import RunConfig
from latexblend.experiments import World


@pytest.fixture(scope="session")
def world():
    """Default-config artifacts, built once and cached under LTXB_HOME (default ~/.latexblend)."""
    return World(RunConfig())


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
