import numpy as np
import pytest

from torus_kpz.grid import TorusGrid
from torus_kpz.noise import constant_spec, default_smooth_spec


@pytest.fixture
def g32():
    return TorusGrid(1, 32)


@pytest.fixture
def g64():
    return TorusGrid(1, 64)


@pytest.fixture
def smooth():
    return default_smooth_spec()


@pytest.fixture
def flat():
    return constant_spec()


def random_density(grid, rng, amp=0.8):
    """Smooth positive density built from a few random Fourier modes."""
    x = grid.coords()
    f = np.ones(grid.shape)
    for k in range(1, 4):
        a, b = rng.uniform(-1, 1, 2) * amp / (2 * k)
        f = f + a * np.cos(2 * np.pi * k * x) + b * np.sin(2 * np.pi * k * x)
    return f / grid.integrate(f)


_ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} [{number}] {label}" + (f": {detail}" if detail else "")
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[k])
