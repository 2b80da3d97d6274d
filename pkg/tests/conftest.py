from importlib.resources import files
from pathlib import Path

import pytest

from multigraph_pf.dss import parse_path
from multigraph_pf.grid import build_multigraph

FIXTURES = Path(str(files("multigraph_pf") / "data"))


@pytest.fixture(scope="session")
def spec4():
    return parse_path(FIXTURES / "ieee4.dss")


@pytest.fixture(scope="session")
def spec13():
    return parse_path(FIXTURES / "ieee13.dss")


@pytest.fixture(scope="session")
def g4(spec4):
    return build_multigraph(spec4)


@pytest.fixture(scope="session")
def g13(spec13):
    return build_multigraph(spec13)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
