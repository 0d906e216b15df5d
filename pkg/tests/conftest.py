import numpy as np
import pytest

from mfbike.env import EnvironmentSpec
from mfbike.generator import assemble_from_rates
from mfbike.rates import ModelParams

W2 = [[-1.0, 1.0], [1.0, -1.0]]


def common_params(lam1=35.0, mu1=30.0, **changes):
    env = EnvironmentSpec(W=W2, lam=[lam1, 50.0], mu=[mu1, 20.0])
    p = ModelParams(K=20, C=10, L=5, alpha=0.5, beta=0.5, env=env)
    return p.replace(**changes) if changes else p


def random_generator(rng, m, density=1.0):
    """Irreducible generator: a random cycle plus random extra edges."""
    W = np.zeros((m, m))
    perm = rng.permutation(m)
    for a, b in zip(perm, np.roll(perm, -1)):
        if a != b:
            W[a, b] = rng.uniform(0.2, 3.0)
    extra = (rng.random((m, m)) < density * 0.5) * rng.uniform(0.0, 2.0, (m, m))
    W += extra
    np.fill_diagonal(W, 0.0)
    np.fill_diagonal(W, -W.sum(axis=1))
    return W


def random_params(rng, max_dim=200, m=None, L=None):
    """Random valid parameter set with (K+2L+1)*m <= max_dim."""
    while True:
        mm = int(rng.integers(1, 5)) if m is None else m
        K = int(rng.integers(2, 16))
        LL = int(rng.integers(0, 5)) if L is None else L
        if (K + 2 * LL + 1) * mm <= max_dim:
            break
    C = int(rng.integers(1, K + 1))
    W = random_generator(rng, mm) if mm > 1 else np.zeros((1, 1))
    env = EnvironmentSpec(W=W, lam=rng.uniform(1.0, 40.0, mm), mu=rng.uniform(1.0, 40.0, mm))
    return ModelParams(K=K, C=C, L=LL, alpha=float(rng.uniform()), beta=float(rng.uniform()), env=env)


def random_distribution(rng, p):
    y = rng.random((p.n_levels, p.m)) ** 3
    return y / y.sum()


def dense_null_vector(V):
    """Stationary vector of a dense generator via SVD null space."""
    _, s, vt = np.linalg.svd(V.T)
    v = vt[-1]
    v = v / v.sum()
    return v, s


def frozen_instance(rng, max_dim=200, m=None, L=None):
    """Random frozen-rate standard-mode generator with strictly positive interior rates."""
    while True:
        mm = int(rng.integers(1, 6)) if m is None else m
        K = int(rng.integers(1, 30))
        LL = int(rng.integers(0, 6)) if L is None else L
        n = K + 2 * LL + 1
        if n * mm <= max_dim:
            break
    W = random_generator(rng, mm) if mm > 1 else np.zeros((1, 1))
    xi = rng.uniform(0.1, 30.0, (n, mm))
    eta = rng.uniform(0.1, 30.0, (n, mm))
    return assemble_from_rates(xi, eta, W), xi, eta


def birth_death(xi, eta):
    w = np.ones(len(xi))
    for k in range(1, len(xi)):
        w[k] = w[k - 1] * xi[k - 1] / eta[k]
    return w / w.sum()


def random_solvable(rng):
    """Random two- or three-state set near the common regime (interior rates, alpha, beta > 0)."""
    m = int(rng.integers(2, 4))
    W = random_generator(rng, m)
    env = EnvironmentSpec(W=W, lam=rng.uniform(15.0, 55.0, m), mu=rng.uniform(10.0, 35.0, m))
    K = int(rng.integers(8, 25))
    return ModelParams(K=K, C=int(rng.integers(2, K)), L=int(rng.integers(1, 6)),
                       alpha=float(rng.uniform(0.1, 0.9)), beta=float(rng.uniform(0.1, 0.9)), env=env)


@pytest.fixture
def p_common():
    return common_params()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------- acceptance summary

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        _CRITERIA[props["criterion"]] = ("PASS" if report.passed else "FAIL", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.split(".")[0].rstrip("abcd")), k)):
        status, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{status}  {key}" + (f"  [{detail}]" if detail else ""))
