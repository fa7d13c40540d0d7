"""Parametric conditional generators y = G_theta(z, x).

Two generator kinds are supported:

``affine``
    ``core = A @ x + B @ z + c``
``mlp``
    ``core = W2 @ tanh(W1 @ [x; z] + b1) + b2``

``theta`` is always a flat vector; the block layout is fixed (row-major
matrices, blocks in declaration order) so that perturbation norms are
reproducible. An optional fixed output map ``y = ret_std * core + ret_mean``
returns samples to the raw return scale; it is not part of ``theta`` and is
never perturbed. Without it ``y = core``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

KINDS = ("affine", "mlp")


class ShapeError(ValueError):
    """Raised when an input does not match the generator dimensions."""


def _check_len(name, arr, expected):
    if arr.ndim != 1 or arr.shape[0] != expected:
        raise ShapeError(f"{name}: expected length {expected}, got shape {arr.shape}")


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Immutable generator description.

    Parameters
    ----------
    kind : {"affine", "mlp"}
    context_dim : int
        Flattened context length (``L * d`` for a return window).
    latent_dim : int
    output_dim : int
    theta : ndarray
        Flat parameter vector, length :meth:`n_params`.
    hidden : int
        Hidden width, used only by ``mlp``.
    ret_mean, ret_std : ndarray or None
        Fixed output map back to the return scale.
    meta : dict
        Free-form metadata (calibration diagnostics, provenance).
    """

    kind: str
    context_dim: int
    latent_dim: int
    output_dim: int
    theta: np.ndarray
    hidden: int = 8
    ret_mean: np.ndarray | None = None
    ret_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        theta = np.array(self.theta, dtype=float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        _check_len("theta", theta, self.n_params)
        for name in ("ret_mean", "ret_std"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                _check_len(name, v, self.output_dim)
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    def __eq__(self, other):
        if not isinstance(other, GeneratorSpec):
            return NotImplemented
        same = lambda a, b: (a is None and b is None) or (a is not None and b is not None
                                                         and np.array_equal(a, b))
        return (self.kind, self.dims, self.hidden) == (other.kind, other.dims, other.hidden) \
            and np.array_equal(self.theta, other.theta) \
            and same(self.ret_mean, other.ret_mean) and same(self.ret_std, other.ret_std)

    __hash__ = object.__hash__

    # -- layout -----------------------------------------------------------

    @property
    def dims(self):
        return (self.context_dim, self.latent_dim, self.output_dim)

    def block_shapes(self):
        return _shapes(self.kind, self.context_dim, self.latent_dim, self.output_dim, self.hidden)

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.block_shapes().values())

    def block_slices(self):
        out, start = {}, 0
        for name, shape in self.block_shapes().items():
            n = int(np.prod(shape))
            out[name] = slice(start, start + n)
            start += n
        return out

    def unflatten(self, theta=None):
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        _check_len("theta", theta, self.n_params)
        shapes = self.block_shapes()
        return {k: theta[s].reshape(shapes[k]) for k, s in self.block_slices().items()}

    def with_theta(self, theta):
        return GeneratorSpec(self.kind, self.context_dim, self.latent_dim, self.output_dim,
                             theta, self.hidden, self.ret_mean, self.ret_std, dict(self.meta))

    # -- evaluation -------------------------------------------------------

    def _check_inputs(self, Z, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.context_dim:
            raise ShapeError(f"context: expected length {self.context_dim}, got {x.shape[0]}")
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != self.latent_dim:
            raise ShapeError(f"latent: expected (*, {self.latent_dim}), got shape {Z.shape}")
        return Z, x

    def _out_scale(self):
        return np.ones(self.output_dim) if self.ret_std is None else self.ret_std

    def _rescale(self, core):
        if self.ret_std is not None:
            core = core * self.ret_std
        if self.ret_mean is not None:
            core = core + self.ret_mean
        return core

    def forward_batch(self, Z, x, theta=None):
        """Outcomes for every row of ``Z`` at a shared context, shape (N, d)."""
        Z, x = self._check_inputs(Z, x)
        p = self.unflatten(theta)
        if self.kind == "affine":
            core = Z @ p["B"].T + (p["A"] @ x + p["c"])
        else:
            H = np.tanh(Z @ p["W1"][:, self.context_dim:].T + (p["W1"][:, :self.context_dim] @ x + p["b1"]))
            core = H @ p["W2"].T + p["b2"]
        return self._rescale(core)

    def vjp_theta_batch(self, Z, x, upstream, theta=None):
        """Sum over rows of ``upstream[i] . dG(z_i, x)/dtheta``, flat length P."""
        Z, x = self._check_inputs(Z, x)
        U = np.asarray(upstream, dtype=float)
        if U.shape != (Z.shape[0], self.output_dim):
            raise ShapeError(f"upstream: expected {(Z.shape[0], self.output_dim)}, got {U.shape}")
        p = self.unflatten(theta)
        U = U * self._out_scale()
        if self.kind == "affine":
            u_sum = U.sum(axis=0)
            blocks = [np.outer(u_sum, x), U.T @ Z, u_sum]
        else:
            F = self.context_dim
            H = np.tanh(Z @ p["W1"][:, F:].T + (p["W1"][:, :F] @ x + p["b1"]))
            dpre = (U @ p["W2"]) * (1.0 - H * H)
            d_sum = dpre.sum(axis=0)
            gW1 = np.concatenate([np.outer(d_sum, x), dpre.T @ Z], axis=1)
            blocks = [gW1, d_sum, U.T @ H, U.sum(axis=0)]
        return np.concatenate([b.ravel() for b in blocks])


def forward(spec, z, x, theta=None):
    """Single outcome ``G_theta(z, x)``."""
    z = np.asarray(z, dtype=float)
    _check_len("latent", z, spec.latent_dim)
    return spec.forward_batch(z[None, :], x, theta)[0]


def vjp_theta(spec, z, x, upstream, theta=None):
    """``upstream^T dG_theta(z, x)/dtheta`` as a flat vector."""
    z = np.asarray(z, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    _check_len("latent", z, spec.latent_dim)
    _check_len("upstream", upstream, spec.output_dim)
    return spec.vjp_theta_batch(z[None, :], x, upstream[None, :], theta)


# -- constructors -----------------------------------------------------------

def affine_from_blocks(A, B, c, ret_mean=None, ret_std=None, meta=None):
    A, B, c = (np.asarray(v, dtype=float) for v in (A, B, c))
    d, F = A.shape
    if B.ndim != 2 or B.shape[0] != d or c.shape != (d,):
        raise ShapeError(f"inconsistent affine blocks A{A.shape} B{B.shape} c{c.shape}")
    theta = np.concatenate([A.ravel(), B.ravel(), c])
    return GeneratorSpec("affine", F, B.shape[1], d, theta, ret_mean=ret_mean,
                         ret_std=ret_std, meta=dict(meta or {}))


def mlp_from_blocks(W1, b1, W2, b2, context_dim, ret_mean=None, ret_std=None):
    W1, b1, W2, b2 = (np.asarray(v, dtype=float) for v in (W1, b1, W2, b2))
    h = W1.shape[0]
    theta = np.concatenate([W1.ravel(), b1, W2.ravel(), b2])
    return GeneratorSpec("mlp", context_dim, W1.shape[1] - context_dim, W2.shape[0], theta,
                         hidden=h, ret_mean=ret_mean, ret_std=ret_std)


def random_mlp(context_dim, latent_dim, output_dim, hidden=8, scale=0.3, seed=0):
    """MLP generator with Gaussian weights; used for tests and demos."""
    n = sum(int(np.prod(s)) for s in _shapes("mlp", context_dim, latent_dim, output_dim, hidden).values())
    theta = scale * np.random.default_rng(seed).standard_normal(n)
    return GeneratorSpec("mlp", context_dim, latent_dim, output_dim, theta, hidden=hidden)


# -- latent draws -------------------------------------------------------------

@dataclass(frozen=True)
class LatentBatch:
    """Fixed standard-normal latent draws, sampled once per solve."""

    draws: np.ndarray
    seed: int

    @property
    def N(self):
        return self.draws.shape[0]


def sample_batch(seed, N, latent_dim):
    if N < 1:
        raise ValueError("latent batch size must be >= 1")
    draws = np.random.default_rng(seed).standard_normal((N, latent_dim))
    draws.setflags(write=False)
    return LatentBatch(draws, seed)


# -- calibration ----------------------------------------------------------------

def calibrate_affine(targets, contexts, latent_dim, ret_mean=None, ret_std=None):
    """Least-squares fit of an affine-Gaussian generator.

    ``targets`` (T, d) are regressed on ``contexts`` (T, F) plus intercept.
    ``B`` is the lower Cholesky factor of the residual covariance, padded with
    zero columns when ``latent_dim > d``. With ``latent_dim < d`` the leading
    principal factors are used instead.

    When ``ret_mean``/``ret_std`` are given, targets are standardized before
    the fit and the map back to returns is attached to the generator.
    """
    Y = np.asarray(targets, dtype=float)
    X = np.asarray(contexts, dtype=float)
    T, d = Y.shape
    F = X.shape[1]
    if X.shape[0] != T:
        raise ShapeError(f"targets have {T} rows but contexts have {X.shape[0]}")
    if T < latent_dim + F + 10:
        raise ValueError(f"need at least {latent_dim + F + 10} rows for calibration, got {T}")
    if ret_std is not None:
        Y = (Y - (0.0 if ret_mean is None else ret_mean)) / ret_std

    D = np.hstack([X, np.ones((T, 1))])
    meta = {"rows": T, "ridge": 0.0}
    if np.linalg.matrix_rank(D) < D.shape[1]:
        meta["ridge"] = 1e-6
        logger.warning("rank-deficient design in calibrate_affine; ridge fallback 1e-6")
        coef = np.linalg.solve(D.T @ D + 1e-6 * np.eye(D.shape[1]), D.T @ Y)
    else:
        coef = np.linalg.lstsq(D, Y, rcond=None)[0]
    A, c = coef[:F].T, coef[F]
    resid = Y - D @ coef
    cov = resid.T @ resid / T
    B = np.zeros((d, latent_dim))
    if np.max(np.abs(cov)) > 1e-14 * max(1.0, np.max(np.abs(Y)) ** 2):
        if latent_dim >= d:
            B[:, :d] = _psd_cholesky(cov)
        else:
            # too few latent factors for a full Cholesky: keep the leading eigenpairs
            vals, vecs = np.linalg.eigh(cov)
            top = np.argsort(vals)[::-1][:latent_dim]
            B[:] = vecs[:, top] * np.sqrt(np.maximum(vals[top], 0.0))
    return affine_from_blocks(A, B, c, ret_mean=ret_mean, ret_std=ret_std, meta=meta)


def _psd_cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # singular residual covariance: jitter until factorizable
        jitter = 1e-12 * max(np.trace(cov), 1e-300)
        while True:
            try:
                return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
            except np.linalg.LinAlgError:
                jitter *= 10


# -- serialization ---------------------------------------------------------------

def to_json(spec):
    doc = {
        "kind": spec.kind,
        "dims": {"context": spec.context_dim, "latent": spec.latent_dim, "output": spec.output_dim},
        "theta": spec.theta.tolist(),
    }
    if spec.kind == "mlp":
        doc["dims"]["hidden"] = spec.hidden
    if spec.ret_mean is not None:
        doc["ret_mean"] = spec.ret_mean.tolist()
    if spec.ret_std is not None:
        doc["ret_std"] = spec.ret_std.tolist()
    if spec.meta:
        doc["meta"] = spec.meta
    return doc


def from_json(doc):
    dims = doc["dims"]
    theta = np.asarray(doc["theta"], dtype=float)
    kw = dict(kind=doc["kind"], context_dim=int(dims["context"]), latent_dim=int(dims["latent"]),
              output_dim=int(dims["output"]), hidden=int(dims.get("hidden", 8)))
    if kw["kind"] not in KINDS:
        raise ValueError(f"unknown generator kind {kw['kind']!r}")
    expected = sum(int(np.prod(s)) for s in _shapes(**kw).values())
    if theta.shape != (expected,):
        raise ShapeError(f"theta has length {theta.size}, {kw['kind']} with dims {dims} needs {expected}")
    return GeneratorSpec(theta=theta, ret_mean=doc.get("ret_mean"), ret_std=doc.get("ret_std"),
                         meta=doc.get("meta", {}), **kw)


def _shapes(kind, context_dim, latent_dim, output_dim, hidden):
    if kind == "affine":
        return {"A": (output_dim, context_dim), "B": (output_dim, latent_dim), "c": (output_dim,)}
    return {"W1": (hidden, context_dim + latent_dim), "b1": (hidden,),
            "W2": (output_dim, hidden), "b2": (output_dim,)}


def save(spec, path):
    Path(path).write_text(json.dumps(to_json(spec), indent=2))


def load(path):
    return from_json(json.loads(Path(path).read_text()))
