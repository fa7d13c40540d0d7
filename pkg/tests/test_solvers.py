import math

import numpy as np
import pytest

from conftest import c_only_oracle, random_affine, rel_err
from sro.generators import affine_from_blocks, random_mlp, sample_batch
from sro.geometry import lp_norm
from sro.losses import DecisionProblem, empirical_utility, grad_w, utility
from sro.solvers import (BatchObjective, NonFiniteError, RobustConfig, robust_objective, sharpness, solve,
                         solve_nominal, solve_sro_first_order, solve_sro_two_timescale, worst_case)

FAST = RobustConfig(rho=0.3, alpha_theta=0.01, alpha_omega=0.1, K=400, N=200, inner_steps=400,
                    inner_alpha=0.05)


def constant_gen(c, F=4):
    d = len(c)
    return affine_from_blocks(np.zeros((d, F)), np.zeros((d, 2)), c)


def on_simplex(w):
    return abs(w.sum() - 1) <= 1e-9 and np.all(w >= -1e-12)




# -- nominal -----------------------------------------------------------------------------

def test_constant_generator_picks_best_asset():
    gen = constant_gen([0.02, -0.05])
    problem = DecisionProblem(2)
    w, _ = solve_nominal(gen, np.zeros(4), problem, FAST.replace(alpha_omega=5.0, K=2000))
    ts = np.linspace(0, 1, 10_001)
    line = [utility(t * 0.02 - (1 - t) * 0.05, 10.0) for t in ts]
    assert ts[int(np.argmax(line))] == 1.0
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-9)


def test_identical_columns_match_equal_split(rng):
    A = rng.standard_normal((1, 4))
    B = rng.standard_normal((1, 2))
    c = rng.standard_normal(1)
    gen = affine_from_blocks(np.vstack([A, A]), np.vstack([B, B]), np.concatenate([c, c]))
    x = rng.standard_normal(4)
    w, trace = solve_nominal(gen, x, DecisionProblem(2), FAST)
    obj = BatchObjective(gen, x, sample_batch(FAST.seed, FAST.N, 2).draws, 10.0)
    assert abs(obj.value(w, gen.theta) - obj.value(np.array([0.5, 0.5]), gen.theta)) <= 1e-9


def test_single_asset():
    gen = constant_gen([0.01])
    for fn in (solve_nominal, solve_sro_first_order, solve_sro_two_timescale):
        w = fn(gen, np.zeros(4), DecisionProblem(1), FAST)[0]
        np.testing.assert_array_equal(w, [1.0])


def test_nominal_objective_monotone(rng):
    # standardized scale: unit-order scenario variance, no output map
    for _ in range(5):
        A = 0.05 * rng.standard_normal((4, 6))
        B = np.diag(rng.uniform(0.5, 1.0, 4))
        gen = affine_from_blocks(A, B, 0.05 * rng.standard_normal(4))
        x = rng.standard_normal(6)
        _, trace = solve_nominal(gen, x, DecisionProblem(4), FAST.replace(alpha_omega=0.1, K=1000))
        assert np.all(np.diff(trace.objective) >= -1e-8)


def test_nominal_matches_brute_force_optimum(rng):
    gen = random_affine(rng, d=3, F=6, dz=4, scale=0.1)
    x = rng.standard_normal(6)
    cfg = FAST.replace(alpha_omega=0.5, K=3000)
    w, _ = solve_nominal(gen, x, DecisionProblem(3), cfg)
    Y = gen.forward_batch(sample_batch(cfg.seed, cfg.N, 4).draws, x)
    n = 400
    best = -math.inf
    for i in range(n + 1):
        for j in range(n + 1 - i):
            v = np.array([i, j, n - i - j]) / n
            best = max(best, empirical_utility(v, Y, 10.0))
    assert empirical_utility(w, Y, 10.0) >= best - 1e-9


# -- degenerate radius ----------------------------------------------------------------------

@pytest.mark.parametrize("fn", [solve_sro_first_order, solve_sro_two_timescale])
def test_zero_radius_is_nominal_bitwise(fn, rng):
    gen = random_affine(rng, with_map=True)
    x = rng.standard_normal(6)
    cfg = FAST.replace(rho=0.0, alpha_omega=5.0)
    w0, t0 = solve_nominal(gen, x, DecisionProblem(3), cfg)
    w1, t1 = fn(gen, x, DecisionProblem(3), cfg)[:2]
    assert w0.tobytes() == w1.tobytes()
    assert t0.objective.tobytes() == t1.objective.tobytes()
    assert t0.weights.tobytes() == t1.weights.tobytes()
    assert np.all(t1.theta_dist == 0.0)


def test_zero_radius_pins_theta(rng):
    gen = random_affine(rng)
    _, _, theta = solve_sro_two_timescale(gen, rng.standard_normal(6), DecisionProblem(3),
                                          FAST.replace(rho=0.0))
    assert theta.tobytes() == gen.theta.tobytes()


# -- first-order -----------------------------------------------------------------------

def test_first_order_constant_generator_is_pessimistic():
    gen = constant_gen([0.02, -0.01, 0.015])
    problem = DecisionProblem(3)
    x = np.zeros(4)
    cfg = FAST.replace(rho=0.01, alpha_omega=5.0, K=1000)
    w_nom, t_nom = solve_nominal(gen, x, problem, cfg)
    w_rob, t_rob = solve_sro_first_order(gen, x, problem, cfg)
    assert t_rob.objective[-1] <= t_nom.objective[-1]
    # the dual step moves c by exactly rho
    np.testing.assert_allclose(t_rob.theta_dist, 0.01, rtol=1e-12)
    assert rel_err(t_rob.theta[-3:], gen.theta[-3:]) > 0


def test_first_order_zero_gradient_branch():
    # c . w = 1/lam at uniform weights: grad_y = 0, so g = 0 and w never moves
    gen = constant_gen([0.1, 0.1])
    w, trace = solve_sro_first_order(gen, np.zeros(4), DecisionProblem(2), FAST.replace(K=5))
    np.testing.assert_array_equal(trace.theta_dist, 0.0)
    np.testing.assert_array_equal(trace.theta, gen.theta)
    np.testing.assert_array_equal(w, [0.5, 0.5])


# -- two-timescale ----------------------------------------------------------------------------

def test_single_iteration_trace():
    gen = random_affine(np.random.default_rng(0))
    for fn in (solve_nominal, solve_sro_first_order, solve_sro_two_timescale):
        trace = fn(gen, np.zeros(6), DecisionProblem(3), FAST.replace(K=1))[1]
        assert len(trace) == 1
        assert len(trace.theta_dist) == 1
        assert trace.weights.shape == (1, 3)


def test_two_timescale_rejects_general_p(rng):
    with pytest.raises(ValueError):
        solve_sro_two_timescale(random_affine(rng), np.zeros(6), DecisionProblem(3), FAST.replace(p=3.0))


def test_timescale_ordering_enforced():
    with pytest.raises(ValueError):
        RobustConfig(alpha_theta=0.1, alpha_omega=0.1)
    with pytest.raises(ValueError):
        RobustConfig(K=0)
    with pytest.raises(ValueError):
        RobustConfig(N=0)


def test_c_only_terminal_matches_inner_oracle():
    rng = np.random.default_rng(5)
    problem = DecisionProblem(3)
    for _ in range(5):
        gen = random_affine(rng, d=3, F=6, dz=4, scale=0.2)
        x = rng.standard_normal(6)
        cfg = FAST.replace(blocks=("c",), alpha_theta=0.01, alpha_omega=0.1, K=1500)
        w, trace, theta = solve_sro_two_timescale(gen, x, problem, cfg)
        draws = sample_batch(cfg.seed, cfg.N, 4).draws
        want = c_only_oracle(gen, x, w, 10.0, cfg.rho, draws)
        got = robust_objective(gen, x, problem, w, cfg)
        assert abs(got - want) <= 0.02 * abs(want)
        # the joint iterate may stall at a local adversary, never below the true infimum
        assert trace.objective[-1] >= want - 1e-12
        n_c = 3
        np.testing.assert_array_equal(theta[:-n_c], gen.theta[:-n_c])


@pytest.mark.parametrize("fn", [solve_sro_first_order, solve_sro_two_timescale])
def test_iterates_feasible(fn, rng):
    gen = random_affine(rng, with_map=True)
    cfg = FAST.replace(alpha_theta=0.05, alpha_omega=5.0)
    w, trace = fn(gen, rng.standard_normal(6), DecisionProblem(3), cfg)[:2]
    assert all(on_simplex(v) for v in trace.weights)
    assert on_simplex(w)
    assert np.all(trace.theta_dist <= cfg.rho * (1 + 1e-12))


def test_infinity_ball_feasible(rng):
    gen = random_affine(rng)
    cfg = FAST.replace(p=math.inf, rho=0.05)
    _, trace, theta = solve_sro_two_timescale(gen, rng.standard_normal(6), DecisionProblem(3), cfg)
    assert lp_norm(theta - gen.theta, math.inf) <= 0.05 * (1 + 1e-12)
    assert np.all(trace.theta_dist <= 0.05 * (1 + 1e-12))


@pytest.mark.parametrize("method", ["nominal", "first-order", "two-timescale"])
def test_deterministic(method, rng):
    gen = random_affine(rng)
    x = rng.standard_normal(6)
    a = solve(method, gen, x, DecisionProblem(3), FAST)
    b = solve(method, gen, x, DecisionProblem(3), FAST)
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].objective.tobytes() == b[1].objective.tobytes()
    assert a[1].theta_dist.tobytes() == b[1].theta_dist.tobytes()


def test_unknown_method():
    with pytest.raises(ValueError):
        solve("sgd", constant_gen([0.0]), np.zeros(4), DecisionProblem(1), FAST)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_aborts_with_iteration():
    gen = constant_gen([math.inf, 0.0])
    with pytest.raises(NonFiniteError, match="iteration 0") as info:
        solve_nominal(gen, np.zeros(4), DecisionProblem(2), FAST)
    assert info.value.iteration == 0


def test_mlp_solvers_run(small_mlp, rng):
    x = rng.standard_normal(6)
    cfg = FAST.replace(K=200, inner_steps=200)
    problem = DecisionProblem(2)
    w, trace, theta = solve_sro_two_timescale(small_mlp, x, problem, cfg)
    assert on_simplex(w)
    assert lp_norm(theta - small_mlp.theta, 2) <= cfg.rho * (1 + 1e-12)
    assert robust_objective(small_mlp, x, problem, w, cfg) <= \
        BatchObjective(small_mlp, x, sample_batch(cfg.seed, cfg.N, 3).draws, 10.0).value(w, small_mlp.theta)


def test_trace_csv(tmp_path, rng):
    gen = random_affine(rng)
    _, trace = solve_nominal(gen, np.zeros(6), DecisionProblem(3), FAST.replace(K=5, stride=2))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,objective,theta_dist,w0,w1,w2"
    assert len(lines) == 6
    assert lines[2].endswith(",,,")
    assert not lines[3].endswith(",")


# -- batch objective ------------------------------------------------------------------------

def test_moment_path_matches_sample_path(rng):
    for _ in range(20):
        gen = random_affine(rng, d=4, F=6, dz=3, with_map=True)
        x = rng.standard_normal(6)
        draws = rng.standard_normal((64, 3))
        w = rng.dirichlet(np.ones(4))
        theta = gen.theta + 0.1 * rng.standard_normal(gen.n_params)
        obj = BatchObjective(gen, x, draws, 10.0)
        Y = gen.forward_batch(draws, x, theta)
        val, gw = obj.value_grad_w(w, theta)
        assert val == pytest.approx(empirical_utility(w, Y, 10.0), rel=1e-10, abs=1e-14)
        assert rel_err(gw, grad_w(w, Y, 10.0)) <= 1e-10
        up = np.outer((1 - 10.0 * (Y @ w)) / 64, w)
        assert rel_err(obj.grad_theta(w, theta), gen.vjp_theta_batch(draws, x, up, theta)) <= 1e-10


# -- robust objective, sharpness -----------------------------------------------------------

def test_robust_zero_radius_is_empirical(rng):
    gen = random_affine(rng)
    x = rng.standard_normal(6)
    w = rng.dirichlet(np.ones(3))
    cfg = FAST.replace(rho=0.0)
    emp = BatchObjective(gen, x, sample_batch(cfg.seed, cfg.N, 4).draws, 10.0).value(w, gen.theta)
    assert robust_objective(gen, x, DecisionProblem(3), w, cfg) == emp
    assert sharpness(gen, x, DecisionProblem(3), w, cfg) == 0.0


def test_robust_monotone_in_radius(rng):
    gen = random_affine(rng)
    x = rng.standard_normal(6)
    w = rng.dirichlet(np.ones(3))
    lo = robust_objective(gen, x, DecisionProblem(3), w, FAST.replace(rho=0.1))
    hi = robust_objective(gen, x, DecisionProblem(3), w, FAST.replace(rho=0.3))
    assert hi <= lo


def test_robust_constant_generator_c_only():
    rng = np.random.default_rng(8)
    for _ in range(10):
        gen = constant_gen(0.05 * rng.standard_normal(3))
        w = rng.dirichlet(np.ones(3))
        cfg = FAST.replace(blocks=("c",), rho=0.05)
        got = robust_objective(gen, np.zeros(4), DecisionProblem(3), w, cfg)
        want = c_only_oracle(gen, np.zeros(4), w, 10.0, cfg.rho, sample_batch(cfg.seed, cfg.N, 2).draws)
        assert abs(got - want) <= 0.01 * abs(want)
        s = sharpness(gen, np.zeros(4), DecisionProblem(3), w, cfg)
        nominal = utility(gen.theta[-3:] @ w, 10.0)
        assert abs(s - (nominal - want)) <= 0.01 * abs(nominal - want)


def test_sharpness_decomposition(rng):
    gen = random_affine(rng)
    x = rng.standard_normal(6)
    problem = DecisionProblem(3)
    for _ in range(5):
        w = rng.dirichlet(np.ones(3))
        emp = BatchObjective(gen, x, sample_batch(FAST.seed, FAST.N, 4).draws, 10.0).value(w, gen.theta)
        rob = robust_objective(gen, x, problem, w, FAST)
        assert abs(rob - (emp - sharpness(gen, x, problem, w, FAST))) <= 1e-12


def test_worst_case_stays_in_ball(rng):
    gen = random_affine(rng)
    _, theta = worst_case(gen, rng.standard_normal(6), DecisionProblem(3), np.ones(3) / 3, FAST)
    assert lp_norm(theta - gen.theta, 2) <= FAST.rho * (1 + 1e-12)


def test_worst_case_mlp(rng):
    gen = random_mlp(6, 3, 2, hidden=5, seed=3)
    x = rng.standard_normal(6)
    w = np.array([0.3, 0.7])
    cfg = FAST.replace(inner_steps=300)
    val, _ = worst_case(gen, x, DecisionProblem(2), w, cfg)
    emp = BatchObjective(gen, x, sample_batch(cfg.seed, cfg.N, 3).draws, 10.0).value(w, gen.theta)
    assert val <= emp
