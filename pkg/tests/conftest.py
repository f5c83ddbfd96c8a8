import numpy as np
import pytest

from mmcount import MMBinomialModel, MMPoissonModel

Q = np.array([[-1.0, 2.0], [1.0, -2.0]])
LAM = np.array([1.0, 3.0])
PI = np.array([2 / 3, 1 / 3])


@pytest.fixture
def q():
    return Q.copy()


@pytest.fixture
def binom3():
    return MMBinomialModel(Q, LAM, n_obligors=3).fit()


@pytest.fixture
def binom2():
    return MMBinomialModel(Q, LAM, n_obligors=2).fit()


@pytest.fixture
def single():
    return MMBinomialModel(Q, LAM, n_obligors=1).fit()


@pytest.fixture
def poisson():
    return MMPoissonModel(Q, LAM).fit()


def scalar_binomial(n, rate=2.0):
    """d=1 model: constant intensity, no hidden state."""
    return MMBinomialModel([[0.0]], [rate], n_obligors=n, require_irreducible=False).fit()


def scalar_poisson(rate=2.0):
    return MMPoissonModel([[0.0]], [rate], require_irreducible=False).fit()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
