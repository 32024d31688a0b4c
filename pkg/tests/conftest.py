import numpy as np
import pytest

from emc2a import kernels
from emc2a.tensor import get_tape, precision


@pytest.fixture
def double():
    with precision("double"):
        yield


@pytest.fixture(autouse=True)
def _clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


@pytest.fixture(params=["cython", "python"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "cython" and kernels.CYTHON_AVAILABLE is False:
        pytest.skip("compiled kernels not built")
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and asserts ``ok``."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def report(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
