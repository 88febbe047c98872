import pytest

ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--fresh", action="store_true",
                     help="retrain acceptance checkpoints instead of reusing the cache")


@pytest.fixture(scope="session")
def fresh(request):
    return request.config.getoption("--fresh")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
