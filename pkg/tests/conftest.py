import numpy as np
import pytest

from sparsegp.kernels import Hyperparameters, kernel_matrix
from sparsegp.models import Dataset

LOG_2PI = np.log(2 * np.pi)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LOG = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LOG:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LOG:
            terminalreporter.write_line(line)


def dense_breakdown(X, y, hyper, Z=None, method="full", jitter=0.0):
    """Objective terms from explicit N x N matrices, slogdet and solve.

    ``jitter`` is the absolute value added to the diagonal of Kuu.
    """
    X = np.atleast_2d(np.asarray(X, float).T).T
    y = np.asarray(y, float)
    N = len(y)
    method = str(method).lower()
    sn2 = hyper.noise_variance
    Kff = kernel_matrix(X, X, hyper)
    trace = 0.0
    if method == "full":
        C = Kff + sn2 * np.eye(N)
    else:
        Z = np.atleast_2d(np.asarray(Z, float).T).T
        Kuu = kernel_matrix(Z, Z, hyper) + jitter * np.eye(len(Z))
        Kuf = kernel_matrix(Z, X, hyper)
        Q = Kuf.T @ np.linalg.solve(Kuu, Kuf)
        C = Q + sn2 * np.eye(N)
        if method == "fitc":
            C = C + np.diag(np.diag(Kff - Q))
        elif method == "vfe":
            trace = np.trace(Kff - Q) / (2 * sn2)
    _, logdet = np.linalg.slogdet(C)
    terms = {"constant": 0.5 * N * LOG_2PI, "data_fit": 0.5 * y @ np.linalg.solve(C, y),
             "complexity_penalty": 0.5 * logdet, "trace_term": trace}
    terms["total"] = sum(terms.values())
    return terms


def dense_nlml(X, y, hyper, Z=None, method="full", jitter=0.0):
    return dense_breakdown(X, y, hyper, Z, method, jitter)["total"]


@pytest.fixture
def toy():
    gen = np.random.default_rng(11)
    X = gen.uniform(-3, 3, size=(25, 2))
    y = np.sin(X[:, 0]) + 0.3 * X[:, 1] + 0.1 * gen.normal(size=25)
    Z = gen.uniform(-3, 3, size=(6, 2))
    hyper = Hyperparameters.from_values(1.3, [0.9, 1.7], 0.05)
    return Dataset(X, y), hyper, Z


@pytest.fixture
def toy1d():
    gen = np.random.default_rng(5)
    X = np.sort(gen.uniform(0, 6, size=40))[:, None]
    y = np.sin(2 * X[:, 0]) + 0.2 * gen.normal(size=40)
    Z = np.linspace(0.5, 5.5, 7)[:, None]
    hyper = Hyperparameters.from_values(0.8, 0.7, 0.04)
    return Dataset(X, y), hyper, Z
