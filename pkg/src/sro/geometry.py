"""Simplex and l_p-ball geometry used by the solvers."""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass

import numpy as np

BALL_TOL = 1e-12


class UnsupportedExponentError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationBall:
    """Closed ball ``{theta : ||theta - center||_p <= radius}``.

    ``radius == 0`` is accepted and collapses the ball to its center.
    """

    center: np.ndarray
    radius: float
    p: float = 2.0

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"radius must be non-negative, got {self.radius}")
        if not self.p > 1:
            raise UnsupportedExponentError(f"exponent must satisfy p > 1, got {self.p}")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))


def lp_norm(v, p):
    v = np.abs(np.asarray(v, dtype=float))
    if v.size == 0:
        return 0.0
    if math.isinf(p):
        return float(v.max())
    if p == 2:
        return float(np.sqrt(np.dot(v, v)))
    if p == 1:
        return float(v.sum())
    m = v.max()
    if m == 0:
        return 0.0
    return float(m * np.sum((v / m) ** p) ** (1.0 / p))


def dual_exponent(p):
    if math.isinf(p):
        return 1.0
    if p <= 1:
        raise UnsupportedExponentError(f"dual exponent requires p > 1, got {p}")
    return p / (p - 1.0)


def project_simplex(v):
    """Euclidean projection onto ``{w : sum(w) = 1, w >= 0}`` (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"cannot project a vector of shape {v.shape} onto the simplex")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    r = np.count_nonzero(u * _counts(v.size) > css)
    return np.maximum(v - css[r - 1] / r, 0.0)


@lru_cache(maxsize=64)
def _counts(n):
    k = np.arange(1.0, n + 1.0)
    k.setflags(write=False)
    return k


def project_ball(eps, ball):
    """Project an offset ``eps`` (relative to the center) onto the ball."""
    eps = np.asarray(eps, dtype=float)
    if ball.p == 2:
        n = float(np.sqrt(np.dot(eps, eps)))
        if n <= ball.radius:
            return eps.copy()
        return eps * (ball.radius / n)
    if math.isinf(ball.p):
        return np.clip(eps, -ball.radius, ball.radius)
    raise UnsupportedExponentError(f"ball projection supports p in {{2, inf}}, got {ball.p}")


def dual_norm_step(g, ball):
    """Maximize ``eps . g`` over ``||eps||_p <= radius``.

    Returns ``(eps_star, value)`` with ``value = radius * ||g||_q``.
    """
    g = np.asarray(g, dtype=float)
    q = dual_exponent(ball.p)
    gq = lp_norm(g, q)
    if gq == 0.0:
        return np.zeros_like(g), 0.0
    if math.isinf(ball.p):
        eps = ball.radius * np.sign(g)
    elif ball.p == 2:
        eps = ball.radius * g / gq
    else:
        # normalize first so |g|^(q-1) cannot overflow
        a = np.abs(g) / gq
        eps = ball.radius * np.sign(g) * a ** (q - 1.0)
    return eps, ball.radius * gq


def ball_membership(theta, ball):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != ball.center.shape:
        raise ValueError(f"dimension mismatch: {theta.shape} vs center {ball.center.shape}")
    return lp_norm(theta - ball.center, ball.p) <= ball.radius * (1.0 + BALL_TOL)
