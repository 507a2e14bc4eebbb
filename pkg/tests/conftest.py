import pytest

from tncraft import fixture_path
from tncraft.netspec import load_network


@pytest.fixture(scope="session")
def deep_net():
    return load_network(fixture_path("deep.net"))


@pytest.fixture(scope="session")
def wide_net():
    return load_network(fixture_path("wide.net"))


@pytest.fixture(scope="session")
def desk_net():
    return load_network(fixture_path("mnist_desk.net"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
