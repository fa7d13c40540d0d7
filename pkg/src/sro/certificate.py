"""Reliability diagnostics: oracle utility, gaps, population slack, regimes,
and the finite-simulation constant for the affine generator.

Utility convention: with ``J*`` the oracle expected utility and ``U_N`` the
worst-case empirical utility over the ball, the certificate reads

    J*(w) >= U_N(w) - eps_N + mu_bar,    mu_bar = min_w [J*(w) - U(w)]

which is the loss-convention upper bound with every sign flipped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .generators import GeneratorSpec, sample_batch
from .geometry import PerturbationBall, lp_norm
from .losses import utility
from .solvers import robust_objective

REGIME_TAU = 0.05
SCHEMA_VERSION = 1


@dataclass
class CertificateReport:
    empirical_utility_nominal: float
    robust_objective: float
    oracle_utility_nominal: float
    oracle_utility_robust: float
    gap_nominal: float
    gap_robust: float
    slack_estimate: float
    epsilon_N: float
    regime: str
    coverage_flag: bool
    coverage_distance: float
    N_oracle: int
    note: str = "slack is a minimum over a finite decision grid, so it upper-bounds the true infimum"

    @property
    def oracle_utility(self):
        return self.oracle_utility_nominal

    def to_dict(self):
        out = {"schema_version": SCHEMA_VERSION}
        out.update(asdict(self))
        return out


# -- oracle utility -----------------------------------------------------------------

def oracle_utilities(oracle_gen, x, lam, W, N_oracle=100_000, seed=0):
    """Monte Carlo expected utility for each row of ``W``.

    Returns ``(means, standard_errors)``; a single latent sample is shared by
    all rows.
    """
    if N_oracle < 2:
        raise ValueError("N_oracle must be >= 2")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    Z = sample_batch(seed, N_oracle, oracle_gen.latent_dim).draws
    Y = oracle_gen.forward_batch(Z, x)
    U = utility(Y @ W.T, lam)
    return U.mean(axis=0), U.std(axis=0, ddof=1) / math.sqrt(N_oracle)


def oracle_utility(oracle_gen, x, problem, w, N_oracle=100_000, seed=0):
    """Monte Carlo estimate of ``E_z[u(G*(z, x) . w)]`` with its standard error."""
    m, se = oracle_utilities(oracle_gen, x, problem.lam, w, N_oracle, seed)
    return float(m[0]), float(se[0])


def _affine_moments(gen, x, w):
    p = gen.unflatten()
    x = np.asarray(x, dtype=float).ravel()
    s = gen._out_scale()
    shift = np.zeros(gen.output_dim) if gen.ret_mean is None else gen.ret_mean
    a = s * w
    mean = a @ (p["A"] @ x + p["c"]) + shift @ w
    std = float(np.linalg.norm(p["B"].T @ a))
    return float(mean), std, a


def affine_expected_utility(gen, x, w, lam):
    """Closed form for the affine generator: ``m - lam/2 (m^2 + s^2)``."""
    if gen.kind != "affine":
        raise ValueError("closed-form expected utility needs the affine generator")
    m, s, _ = _affine_moments(gen, x, np.asarray(w, dtype=float))
    return m - 0.5 * lam * (m * m + s * s)


def affine_population_robust(gen, x, w, lam, rho, blocks=None, n_grid=4001):
    """Exact worst-case expected utility over an l2 parameter ball (affine).

    Portfolio return is Gaussian with mean linear in (A, c) and standard
    deviation ``||B^T a||``. Splitting the radius between the mean block and
    the B block (``r1^2 + r2^2 = rho^2``) reduces the problem to a search over
    one angle, done on a dense grid with a golden-section polish.
    """
    if gen.kind != "affine":
        raise ValueError("population robust criterion is only available for the affine generator")
    blocks = set(("A", "B", "c") if blocks is None else blocks)
    w = np.asarray(w, dtype=float)
    m0, s0, a = _affine_moments(gen, x, w)
    na = float(np.linalg.norm(a))
    x = np.asarray(x, dtype=float).ravel()
    k_mean = na * math.sqrt(("A" in blocks) * float(x @ x) + ("c" in blocks))
    k_std = na if "B" in blocks else 0.0

    def value(phi, sign):
        m = m0 + sign * rho * k_mean * np.cos(phi)
        s = s0 + rho * k_std * np.sin(phi)
        return m - 0.5 * lam * (m * m + s * s)

    best = math.inf
    for sign in (-1.0, 1.0):
        phis = np.linspace(0.0, 0.5 * math.pi, n_grid)
        vals = value(phis, sign)
        i = int(np.argmin(vals))
        lo, hi = phis[max(i - 1, 0)], phis[min(i + 1, n_grid - 1)]
        g = (math.sqrt(5) - 1) / 2
        for _ in range(80):
            c1, c2 = hi - g * (hi - lo), lo + g * (hi - lo)
            if value(c1, sign) < value(c2, sign):
                hi = c2
            else:
                lo = c1
        best = min(best, float(vals[i]), float(value(0.5 * (lo + hi), sign)))
    return best


# -- gaps, coverage, regimes --------------------------------------------------------

def gaps(empirical_nominal, oracle_nominal, robust_value, oracle_robust):
    """Empirical-to-oracle gaps ``(nominal, robust)``; plain differences."""
    return empirical_nominal - oracle_nominal, robust_value - oracle_robust


def coverage_check(oracle_gen, nominal_gen, ball):
    """Parameter-proximity coverage test; returns ``(covered, distance)``."""
    if oracle_gen.kind != nominal_gen.kind or oracle_gen.dims != nominal_gen.dims \
            or oracle_gen.n_params != nominal_gen.n_params:
        raise ValueError("coverage check needs generators of the same kind and dimensions")
    dist = lp_norm(oracle_gen.theta - nominal_gen.theta, ball.p)
    return dist <= ball.radius * (1.0 + 1e-12), dist


def classify_regime(mu_bar, epsilon_N, tau=REGIME_TAU):
    if not epsilon_N > 0:
        raise ValueError("epsilon_N must be positive")
    if mu_bar <= tau * epsilon_N:
        return "small"
    if mu_bar < epsilon_N:
        return "moderate"
    return "large"


# -- slack ---------------------------------------------------------------------

def decision_grid(d, size=64, seed=0, extra=()):
    """Simplex vertices, any extra decisions, then seeded Dirichlet(1) fill."""
    pts = [row for row in np.eye(d)]
    pts += [np.asarray(e, dtype=float) for e in extra]
    n_fill = max(size - len(pts), 0)
    if n_fill:
        pts += list(np.random.default_rng(seed).dirichlet(np.ones(d), size=n_fill))
    return np.array(pts)


@dataclass
class SlackResult:
    mu_bar: float
    argmin: np.ndarray
    grid: np.ndarray
    oracle: np.ndarray
    robust: np.ndarray
    stderr: float
    coverage: bool
    coverage_distance: float


def slack_estimate(oracle_gen, nominal_gen, x, problem, cfg, omega_grid_size=64, extra=(),
                   x_oracle=None, N_oracle=100_000, N_robust=20_000, seed=0, exact=False):
    """Estimate ``mu_bar = min_w [J*(w) - U(w)]`` on a decision grid.

    ``U`` is approximated by the adversary loop on a large batch and
    ``stderr`` combines the Monte Carlo errors of both terms (largest over
    the grid); with
    ``exact=True`` (affine generators, p=2 only) both ``J*`` and ``U`` use
    closed forms instead.
    """
    x_oracle = x if x_oracle is None else x_oracle
    ball = PerturbationBall(nominal_gen.theta, cfg.rho, cfg.p)
    try:
        covered, dist = coverage_check(oracle_gen, nominal_gen, ball)
    except ValueError:
        covered, dist = False, math.nan
    grid = decision_grid(problem.n_assets, omega_grid_size, seed, extra)
    if exact:
        J = np.array([affine_expected_utility(oracle_gen, x_oracle, w, problem.lam) for w in grid])
        U = np.array([affine_population_robust(nominal_gen, x, w, problem.lam, cfg.rho, cfg.blocks)
                      for w in grid])
        se = 0.0
    else:
        J, J_se = oracle_utilities(oracle_gen, x_oracle, problem.lam, grid, N_oracle, seed + 1)
        big = cfg.replace(N=N_robust, seed=seed + 2)
        batch = sample_batch(big.seed, big.N, nominal_gen.latent_dim)
        U = np.array([robust_objective(nominal_gen, x, problem, w, big, batch) for w in grid])
        # batch error of U approximated by its spread at theta_hat
        u = utility(nominal_gen.forward_batch(batch.draws, x) @ grid.T, problem.lam)
        U_se = u.std(axis=0, ddof=1) / math.sqrt(N_robust)
        se = float(np.max(np.hypot(J_se, U_se)))
    mu = J - U
    i = int(np.argmin(mu))
    return SlackResult(float(mu[i]), grid[i], grid, J, U, se, bool(covered), float(dist))


# -- finite-simulation constant -------------------------------------------------------

def certificate_constants(gen: GeneratorSpec, lam, return_bound, ball, delta, N,
                          blocks=None, eps_grid=None):
    """Finite-simulation term ``eps_N`` for the affine generator.

    ``eps_N = L_y L_z sqrt(2 (log N_W(eps) + log(1/delta)) / N) + 2 L_w eps``
    minimized over ``eps``, with the simplex covering bound
    ``N_W(eps) <= (3/eps)^d`` (``N_W = 1`` when ``d = 1``).
    """
    if gen.kind != "affine":
        raise ValueError("certificate constants are only derived for the affine generator")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    d, dz = gen.output_dim, gen.latent_dim
    R = float(return_bound)
    B = gen.unflatten()["B"]
    s_max = float(np.max(gen._out_scale()))
    spec_norm = float(np.linalg.norm(B, 2)) if B.size else 0.0
    if blocks is not None and "B" not in blocks:
        growth = 0.0
    elif ball.p == 2:
        growth = ball.radius
    elif math.isinf(ball.p):
        growth = ball.radius * math.sqrt(d * dz)
    else:
        raise ValueError(f"L_z bound implemented for p in {{2, inf}}, got {ball.p}")
    L_z = s_max * (spec_norm + growth)
    L_y = 1.0 + lam * d * R
    L_w = L_y * R * math.sqrt(d)

    if d == 1:
        eps_grid = np.array([0.0])
    elif eps_grid is None:
        eps_grid = np.logspace(-6, 0, 241)
    eps_grid = np.asarray(eps_grid, dtype=float)
    with np.errstate(divide="ignore"):
        log_cover = np.where(eps_grid > 0, np.maximum(d * np.log(3.0 / eps_grid), 0.0), 0.0) \
            if d > 1 else np.zeros_like(eps_grid)
    vals = L_y * L_z * np.sqrt(2.0 * (log_cover + math.log(1.0 / delta)) / N) + 2.0 * L_w * eps_grid
    i = int(np.argmin(vals))
    return {"epsilon_N": float(vals[i]), "eps": float(eps_grid[i]), "L_y": L_y, "L_z": L_z,
            "L_omega": L_w, "log_cover": float(log_cover[i])}


# -- empirical validation of the uniform bound -----------------------------------------

def bound_check(oracle_gen, nominal_gen, x, problem, cfg, N, delta, reps, return_bound,
                grid_size=16, seed=0, x_oracle=None):
    """Replicate the certificate over fresh latent batches.

    The population quantities (oracle utility, slack) are computed once in
    closed form; each replication draws a new batch of size ``N`` and checks
    ``J*(w) >= U_N(w) - eps_N + mu_bar`` at every grid decision. Returns the
    per-replication pass flags and the constants used.
    """
    x_oracle = x if x_oracle is None else x_oracle
    grid = decision_grid(problem.n_assets, grid_size, seed)
    slack = slack_estimate(oracle_gen, nominal_gen, x, problem, cfg, grid_size, x_oracle=x_oracle,
                           seed=seed, exact=True)
    ball = PerturbationBall(nominal_gen.theta, cfg.rho, cfg.p)
    eps_N = certificate_constants(nominal_gen, problem.lam, return_bound, ball, delta, N,
                                  cfg.blocks)["epsilon_N"]
    J = np.array([affine_expected_utility(oracle_gen, x_oracle, w, problem.lam) for w in grid])
    rep_cfg = cfg.replace(N=N)
    passed = []
    for r in range(reps):
        batch = sample_batch(seed + 1000 + r, N, nominal_gen.latent_dim)
        U_N = np.array([robust_objective(nominal_gen, x, problem, w, rep_cfg, batch) for w in grid])
        passed.append(bool(np.all(J >= U_N - eps_N + slack.mu_bar)))
    return np.array(passed), {"epsilon_N": eps_N, "mu_bar": slack.mu_bar,
                              "coverage": slack.coverage, "coverage_distance": slack.coverage_distance}
