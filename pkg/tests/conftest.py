import numpy as np
import pytest

from wima import _backend

BACKENDS = sorted(_backend.available())

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(params=BACKENDS)
def backend(request):
    with _backend.use(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
