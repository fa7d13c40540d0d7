import numpy as np
import pytest

from sro.generators import affine_from_blocks, random_mlp
from sro.losses import utility


def central_fd(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_affine(rng, d=3, F=6, dz=4, scale=0.3, with_map=False):
    A = scale * rng.standard_normal((d, F))
    B = scale * rng.standard_normal((d, dz))
    c = scale * rng.standard_normal(d)
    if with_map:
        return affine_from_blocks(A, B, c, ret_mean=0.001 * rng.standard_normal(d),
                                  ret_std=rng.uniform(0.01, 0.03, d))
    return affine_from_blocks(A, B, c)


def shifted(gen, dist, rng):
    """Copy of ``gen`` whose parameters sit exactly ``dist`` away in l2."""
    v = rng.standard_normal(gen.n_params)
    return gen.with_theta(gen.theta + dist * v / np.linalg.norm(v))


def scaled_affine(rng, d=3, F=6, dz=3):
    A = 0.1 * rng.standard_normal((d, F))
    B = np.linalg.cholesky(0.3 * np.eye(d) + 0.7 * np.ones((d, d)) / d)
    B = np.hstack([B, np.zeros((d, dz - d))]) if dz > d else B
    return affine_from_blocks(A, B, 0.2 * rng.standard_normal(d), ret_mean=np.zeros(d),
                              ret_std=rng.uniform(0.01, 0.03, d))


def c_only_oracle(gen, x, w, lam, rho, draws, n=20001):
    """1-D inner problem: a c-shift moves every scenario return by the same t."""
    pi = gen.forward_batch(draws, x) @ w
    a = gen._out_scale() * w
    reach = rho * np.linalg.norm(a)
    ts = np.linspace(-reach, reach, n)
    vals = [np.mean(utility(pi + t, lam)) for t in ts]
    return float(np.min(vals))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mlp():
    return random_mlp(6, 3, 2, hidden=5, seed=7)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}  [{detail}]")
