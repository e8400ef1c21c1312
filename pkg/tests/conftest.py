import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run a test once through each kernel implementation."""
    from rdpfusion import _accel, kernels

    if request.param == "numpy":
        monkeypatch.setattr(kernels, "use_numba", lambda: False)
    elif not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    return request.param


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
