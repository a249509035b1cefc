import numpy as np
import pytest

from perfinf import (RngStream, make_gaussian_atlas, make_gaussian_location, make_linear_atlas,
                     make_location_family, squared_loss_game)

SIGMA2 = [0.25, 0.25]
THETA0 = np.array([1.0, 2.0])


@pytest.fixture
def rng():
    return RngStream(20240611)


@pytest.fixture
def gauss02():
    return make_gaussian_location(0.2, SIGMA2)


@pytest.fixture
def sq2():
    return squared_loss_game((2,))


@pytest.fixture
def gauss_atlas():
    return make_gaussian_atlas(SIGMA2)


@pytest.fixture
def loc_atlas():
    return make_linear_atlas(0.5, b=1.0)


@pytest.fixture
def sq1():
    return squared_loss_game((1,), weight=1.0)


def location(eps_mis=0.0, sigma=0.5):
    return make_location_family(1.0, 0.5, 0.3, eps_mis, sigma)


def central_diff(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    out = []
    for j in range(x.shape[-1]):
        e = np.zeros_like(x)
        e[..., j] = h
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(out, axis=-1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
