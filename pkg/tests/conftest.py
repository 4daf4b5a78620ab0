import numpy as np
import pytest
from hypothesis import settings

from nrss.model import Dataset, Hyperparams, ModelParams, PriorNetwork, edges_to_matrix, n_edges

settings.register_profile("nrss", max_examples=40, deadline=None)
settings.load_profile("nrss")


def make_instance(seed, V=4, P=6, Q=2, N=30, noise=0.3, density=0.7):
    """Small random dataset with a rank-one signal on a few predictors."""
    rng = np.random.default_rng(seed)
    X = rng.binomial(2, 0.3, size=(N, P)).astype(float)
    set_of = np.sort(np.arange(P) % Q)
    U = rng.normal(size=(V, P)) * (rng.random((V, P)) < density)
    U[:, P // 2:] = 0.0
    iu, ju = np.triu_indices(V, 1)
    mean = X @ (U[iu] * U[ju]).T
    A = edges_to_matrix(mean + noise * rng.normal(size=mean.shape), V)
    psi = np.triu((rng.random((V, V)) < 0.6).astype(float), 1)
    return Dataset(A, X, set_of), PriorNetwork(psi + psi.T)


def random_params(rng, V, P, Q, positive=True):
    f = rng.uniform(0.3, 2.0, Q)
    g = rng.uniform(0.3, 2.0, V)
    H = rng.normal(size=(V, P))
    B0 = edges_to_matrix(rng.normal(size=n_edges(V)), V, diag=0.0)
    return ModelParams(f, g, H, B0, rng.normal(size=V), rng.uniform(0.5, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hyper():
    return Hyperparams(lambda_f=0.7, lambda_h=1.3, psi=0.2, nu=0.8, tau=1.5, eta=0.9)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
