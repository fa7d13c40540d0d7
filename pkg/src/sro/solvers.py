"""Nominal and sampler-robust portfolio solvers.

All solvers work on a fixed latent batch drawn once per solve. The decision
maker ascends empirical utility over the simplex; the adversary moves the
generator parameters inside a ball around the fitted ``theta_hat`` so as to
*decrease* utility.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .generators import GeneratorSpec, LatentBatch, sample_batch
from .geometry import PerturbationBall, dual_norm_step, lp_norm, project_ball, project_simplex

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """A solver iterate produced a non-finite objective or gradient."""

    def __init__(self, where, iteration):
        super().__init__(f"non-finite {where} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class RobustConfig:
    """Solver settings.

    ``blocks`` restricts the perturbation ball to the named parameter blocks
    (e.g. ``("c",)``); the remaining parameters stay at ``theta_hat``.
    ``inner_alpha`` is the adversary step used by :func:`robust_objective`;
    ``None`` means ``alpha_theta``.
    """

    rho: float = 0.3
    p: float = 2.0
    alpha_theta: float = 1e-3
    alpha_omega: float = 0.1
    K: int = 12000
    N: int = 500
    seed: int = 0
    inner_steps: int = 2000
    inner_alpha: float | None = None
    blocks: tuple | None = None
    stride: int = 1

    def __post_init__(self):
        if not self.alpha_theta < self.alpha_omega:
            raise ValueError("two-timescale ordering requires alpha_theta < alpha_omega "
                             f"(got {self.alpha_theta} >= {self.alpha_omega})")
        if self.K < 1 or self.N < 1 or self.inner_steps < 1 or self.stride < 1:
            raise ValueError("K, N, inner_steps and stride must all be >= 1")
        if not self.rho >= 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(self.blocks))

    def replace(self, **changes):
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return RobustConfig(**kw)


@dataclass
class SolveTrace:
    method: str
    objective: np.ndarray
    theta_dist: np.ndarray
    snap_iters: np.ndarray
    weights: np.ndarray
    w: np.ndarray
    theta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.objective)

    def to_csv(self, path):
        d = self.weights.shape[1]
        snaps = dict(zip(self.snap_iters.tolist(), self.weights))
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "objective", "theta_dist"] + [f"w{j}" for j in range(d)])
            for k, (obj, dist) in enumerate(zip(self.objective, self.theta_dist)):
                wk = snaps.get(k)
                tail = [repr(float(v)) for v in wk] if wk is not None else [""] * d
                wr.writerow([k, repr(float(obj)), repr(float(dist))] + tail)


# -- batch objective ------------------------------------------------------------

class BatchObjective:
    """Empirical utility ``J_B(w, theta)`` on a fixed latent batch.

    For the affine generator the objective depends on the batch only through
    its first two moments, which keeps every evaluation O(d * d_z) regardless
    of the batch size. Other generators are evaluated sample by sample.
    """

    def __init__(self, gen: GeneratorSpec, x, draws, lam):
        self.gen = gen
        self.x = np.asarray(x, dtype=float).ravel()
        self.Z = np.asarray(draws, dtype=float)
        gen._check_inputs(self.Z, self.x)
        self.lam = float(lam)
        self.N = self.Z.shape[0]
        self._s = gen._out_scale()
        self._m = np.zeros(gen.output_dim) if gen.ret_mean is None else gen.ret_mean
        if gen.kind == "affine":
            self.zbar = self.Z.mean(axis=0)
            self.M = self.Z.T @ self.Z / self.N
            sl = gen.block_slices()
            self._sl = (sl["A"], sl["B"], sl["c"])
            self._shapeA = (gen.output_dim, gen.context_dim)
            self._shapeB = (gen.output_dim, gen.latent_dim)
        self._cache_key = None

    # affine helpers
    def _affine_state(self, theta):
        key = id(theta)
        if self._cache_key is not None and self._cache_key[0] == key and self._cache_key[1] is theta:
            return self._cache_val
        sA, sB, sc = self._sl
        A = theta[sA].reshape(self._shapeA)
        B = theta[sB].reshape(self._shapeB)
        e = self._s * (A @ self.x + theta[sc]) + self._m
        D = self._s[:, None] * B
        self._cache_key, self._cache_val = (key, theta), (e, D)
        return e, D

    def _affine_terms(self, w, theta):
        e, D = self._affine_state(theta)
        mu = e @ w
        b = D.T @ w
        bz = b @ self.zbar
        Mb = self.M @ b
        mean_pi = mu + bz
        value = mean_pi - 0.5 * self.lam * (mu * mu + 2.0 * mu * bz + b @ Mb)
        g_mu = 1.0 - self.lam * mean_pi
        g_b = self.zbar * (1.0 - self.lam * mu) - self.lam * Mb
        return e, D, value, g_mu, g_b

    def scenarios(self, theta):
        return self.gen.forward_batch(self.Z, self.x, theta)

    def value(self, w, theta):
        if self.gen.kind == "affine":
            return float(self._affine_terms(w, theta)[2])
        return losses.empirical_utility(w, self.scenarios(theta), self.lam)

    def value_grad_w(self, w, theta):
        if self.gen.kind == "affine":
            e, D, value, g_mu, g_b = self._affine_terms(w, theta)
            return float(value), g_mu * e + D @ g_b
        Y = self.scenarios(theta)
        return losses.empirical_utility(w, Y, self.lam), losses.grad_w(w, Y, self.lam)

    def grad_theta(self, w, theta):
        if self.gen.kind == "affine":
            _, _, _, g_mu, g_b = self._affine_terms(w, theta)
            a = self._s * w
            sA, sB, sc = self._sl
            out = np.empty(sc.stop)
            out[sA] = (a[:, None] * (g_mu * self.x)).ravel()
            out[sB] = (a[:, None] * g_b).ravel()
            out[sc] = g_mu * a
            return out
        Y = self.scenarios(theta)
        pi = Y @ w
        upstream = np.outer((1.0 - self.lam * pi) / self.N, w)
        return self.gen.vjp_theta_batch(self.Z, self.x, upstream, theta)


def _block_index(gen, blocks):
    if blocks is None:
        return None
    sl = gen.block_slices()
    unknown = set(blocks) - set(sl)
    if unknown:
        raise ValueError(f"unknown parameter blocks {sorted(unknown)} for {gen.kind}")
    return np.concatenate([np.arange(sl[b].start, sl[b].stop) for b in blocks])


class _Perturbation:
    """Maps between the full theta and the (possibly masked) perturbed sub-vector."""

    def __init__(self, gen, cfg):
        self.theta_hat = np.array(gen.theta)
        self.idx = _block_index(gen, cfg.blocks)
        size = gen.n_params if self.idx is None else len(self.idx)
        self.ball = PerturbationBall(np.zeros(size), cfg.rho, cfg.p)

    def restrict(self, v):
        return v if self.idx is None else v[self.idx]

    def theta(self, eps):
        if self.idx is None:
            return self.theta_hat + eps
        out = self.theta_hat.copy()
        out[self.idx] += eps
        return out

    def dist(self, theta):
        return lp_norm(self.restrict(theta - self.theta_hat), self.ball.p)


def _check(where, k, *vals):
    # NaN/inf anywhere propagates into the sum
    total = 0.0
    for v in vals:
        total += v if isinstance(v, float) else v.sum()
    if not math.isfinite(total):
        raise NonFiniteError(where, k)


def _setup(gen, x, problem, cfg, batch):
    if gen.output_dim != problem.n_assets:
        raise ValueError(f"generator outputs {gen.output_dim} assets, problem has {problem.n_assets}")
    if batch is None:
        batch = sample_batch(cfg.seed, cfg.N, gen.latent_dim)
    draws = batch.draws if isinstance(batch, LatentBatch) else batch
    return BatchObjective(gen, x, draws, problem.lam)


class _Recorder:
    def __init__(self, K, d, stride):
        self.obj = np.empty(K)
        self.dist = np.empty(K)
        self.stride = stride
        self.iters, self.snaps = [], []

    def record(self, k, value, dist, w):
        self.obj[k] = value
        self.dist[k] = dist
        if k % self.stride == 0:
            self.iters.append(k)
            self.snaps.append(w)

    def trace(self, method, w, theta=None, **meta):
        return SolveTrace(method, self.obj, self.dist, np.array(self.iters, dtype=int),
                          np.array(self.snaps), w, theta, meta)


def solve_nominal(gen, x, problem, cfg, batch=None):
    """Projected gradient ascent on the empirical utility at ``theta_hat``."""
    obj = _setup(gen, x, problem, cfg, batch)
    theta = np.array(gen.theta)
    d = problem.n_assets
    w = np.full(d, 1.0 / d)
    rec = _Recorder(cfg.K, d, cfg.stride)
    for k in range(cfg.K):
        val, gw = obj.value_grad_w(w, theta)
        _check("objective/gradient", k, val, gw)
        rec.record(k, val, 0.0, w)
        w = project_simplex(w + cfg.alpha_omega * gw)
    return w, rec.trace("nominal", w)


def solve_sro_first_order(gen, x, problem, cfg, batch=None):
    """Decision ascent against the first-order worst-case perturbation.

    Each iteration linearizes utility in theta at ``theta_hat`` and moves to
    the dual-norm minimizer of the linearization before the decision step.
    """
    obj = _setup(gen, x, problem, cfg, batch)
    pert = _Perturbation(gen, cfg)
    theta_hat = pert.theta_hat
    d = problem.n_assets
    w = np.full(d, 1.0 / d)
    rec = _Recorder(cfg.K, d, cfg.stride)
    theta_t = theta_hat
    for k in range(cfg.K):
        g = pert.restrict(obj.grad_theta(w, theta_hat))
        _check("theta-gradient", k, g)
        eps, _ = dual_norm_step(-g, pert.ball)
        theta_t = pert.theta(eps)
        val, gw = obj.value_grad_w(w, theta_t)
        _check("objective/gradient", k, val, gw)
        rec.record(k, val, pert.dist(theta_t), w)
        w = project_simplex(w + cfg.alpha_omega * gw)
    return w, rec.trace("first-order", w, theta_t)


def solve_sro_two_timescale(gen, x, problem, cfg, batch=None):
    """Alternating projected descent (adversary, slow) / ascent (decision, fast).

    Returns ``(w, trace, theta_adv)``.
    """
    if not (cfg.p == 2 or math.isinf(cfg.p)):
        raise ValueError(f"two-timescale solver needs p in {{2, inf}}, got {cfg.p}")
    obj = _setup(gen, x, problem, cfg, batch)
    pert = _Perturbation(gen, cfg)
    d = problem.n_assets
    w = np.full(d, 1.0 / d)
    eps = np.zeros(pert.ball.center.shape)
    theta = pert.theta(eps)
    rec = _Recorder(cfg.K, d, cfg.stride)
    for k in range(cfg.K):
        g = pert.restrict(obj.grad_theta(w, theta))
        _check("theta-gradient", k, g)
        eps = project_ball(eps - cfg.alpha_theta * g, pert.ball)
        theta = pert.theta(eps)
        val, gw = obj.value_grad_w(w, theta)
        _check("objective/gradient", k, val, gw)
        rec.record(k, val, pert.dist(theta), w)
        w = project_simplex(w + cfg.alpha_omega * gw)
    return w, rec.trace("two-timescale", w, theta), theta


SOLVERS = {
    "nominal": solve_nominal,
    "first-order": solve_sro_first_order,
    "two-timescale": lambda *a, **kw: solve_sro_two_timescale(*a, **kw)[:2],
}


def solve(method, gen, x, problem, cfg, batch=None):
    """Dispatch by name; always returns ``(w, trace)``."""
    try:
        fn = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown solver {method!r}; choose from {sorted(SOLVERS)}") from None
    return fn(gen, x, problem, cfg, batch)


# -- fixed-decision diagnostics ------------------------------------------------------

def worst_case(gen, x, problem, w, cfg, batch=None):
    """Adversary-only loop at a frozen decision.

    Returns ``(value, theta)`` for the lowest empirical utility visited,
    starting from (and including) ``theta_hat``.
    """
    if not (cfg.p == 2 or math.isinf(cfg.p)):
        raise ValueError(f"adversary loop needs p in {{2, inf}}, got {cfg.p}")
    obj = _setup(gen, x, problem, cfg, batch)
    pert = _Perturbation(gen, cfg)
    w = np.asarray(w, dtype=float)
    alpha = cfg.alpha_theta if cfg.inner_alpha is None else cfg.inner_alpha
    theta = pert.theta_hat
    best, best_theta = obj.value(w, theta), theta
    if cfg.rho == 0:
        return best, best_theta
    eps = np.zeros(pert.ball.center.shape)
    for k in range(cfg.inner_steps):
        g = pert.restrict(obj.grad_theta(w, theta))
        _check("theta-gradient", k, g)
        eps = project_ball(eps - alpha * g, pert.ball)
        theta = pert.theta(eps)
        val = obj.value(w, theta)
        _check("objective", k, val)
        if val < best:
            best, best_theta = val, theta
    return best, best_theta


def robust_objective(gen, x, problem, w, cfg, batch=None):
    """Worst-case (minimum) empirical utility over the parameter ball."""
    return worst_case(gen, x, problem, w, cfg, batch)[0]


def sharpness(gen, x, problem, w, cfg, batch=None):
    """Nominal empirical utility minus the robust objective (>= 0)."""
    obj = _setup(gen, x, problem, cfg, batch)
    nominal = obj.value(np.asarray(w, dtype=float), np.array(gen.theta))
    return nominal - robust_objective(gen, x, problem, w, cfg, batch)
