import functools
import sys

import pytest

from lapguide.cci import discretize
from lapguide.problem import example_problem


@functools.lru_cache(maxsize=None)
def problem(name: str):
    return example_problem(name)


@functools.lru_cache(maxsize=None)
def disc(name: str, h: float):
    """Discretization (mesh, pencil, lazily computed spectrum) shared by every test in the session."""
    return discretize(problem(name), h)


@pytest.fixture(scope="session")
def get_disc():
    return disc


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
