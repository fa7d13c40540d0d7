import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_fd, rel_err
from sro.losses import DecisionProblem, empirical_utility, grad_w, grad_y, utility


@pytest.mark.parametrize("pi,want", [(0.0, 0.0), (0.1, 0.05), (0.2, 0.0)])
def test_utility_examples(pi, want):
    assert utility(pi, 10.0) == pytest.approx(want, abs=1e-15)


def test_problem_rejects_bad_lambda():
    with pytest.raises(ValueError):
        DecisionProblem(3, lam=0.0)
    with pytest.raises(ValueError):
        DecisionProblem(3, lam=-1.0)


def test_empirical_utility_zero_scenarios():
    assert empirical_utility(np.full(3, 1 / 3), np.zeros((5, 3)), 10.0) == 0.0


def test_empirical_utility_flat_scenario(rng):
    w = rng.dirichlet(np.ones(4))
    assert empirical_utility(w, np.full((1, 4), 0.1), 10.0) == pytest.approx(0.05, abs=1e-15)


def test_empirical_utility_matches_loop(rng):
    R = 0.05 * rng.standard_normal((50, 4))
    w = rng.dirichlet(np.ones(4))
    total = 0.0
    for row in R:
        pi = sum(r * wj for r, wj in zip(row, w))
        total += pi - 5.0 * pi * pi
    assert abs(empirical_utility(w, R, 10.0) - total / 50) <= 1e-12


def test_empirical_utility_rejects_empty():
    with pytest.raises(ValueError):
        empirical_utility(np.ones(2) / 2, np.zeros((0, 2)), 10.0)


def test_grad_w_zero_scenarios():
    np.testing.assert_array_equal(grad_w(np.ones(3) / 3, np.zeros((4, 3)), 10.0), 0.0)


def test_grad_w_stationary_point():
    r = np.array([[0.1, 0.3]])
    w = np.array([1.0, 0.0])
    np.testing.assert_allclose(grad_w(w, r, 10.0), 0.0, atol=1e-15)


def test_grad_w_finite_differences(rng):
    for _ in range(100):
        R = 0.1 * rng.standard_normal((30, 4))
        w = rng.dirichlet(np.ones(4))
        fd = central_fd(lambda v: empirical_utility(v, R, 10.0), w)
        assert rel_err(grad_w(w, R, 10.0), fd) <= 1e-6


def test_grad_y_examples(rng):
    w = rng.dirichlet(np.ones(3))
    np.testing.assert_array_equal(grad_y(w, np.zeros(3), 10.0), w)
    y = np.full(3, 0.1)
    np.testing.assert_allclose(grad_y(w, y, 10.0), 0.0, atol=1e-15)


def test_grad_y_finite_differences(rng):
    for _ in range(100):
        w = rng.dirichlet(np.ones(4))
        y = 0.2 * rng.standard_normal(4)
        fd = central_fd(lambda v: utility(v @ w, 10.0), y)
        assert rel_err(grad_y(w, y, 10.0), fd) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50.0))
def test_empirical_utility_concave_in_w(seed, lam):
    rng = np.random.default_rng(seed)
    R = 0.1 * rng.standard_normal((20, 3))
    w1, w2 = rng.dirichlet(np.ones(3), size=2)
    mid = empirical_utility((w1 + w2) / 2, R, lam)
    assert mid >= 0.5 * (empirical_utility(w1, R, lam) + empirical_utility(w2, R, lam)) - 1e-12
