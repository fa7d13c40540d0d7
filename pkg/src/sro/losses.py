"""Quadratic-utility portfolio objective and its gradients.

Utility convention throughout: the decision maker maximizes
``u(pi) = pi - lam/2 * pi**2`` and the adversarial sampler minimizes it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DecisionProblem:
    """Long-only portfolio problem with quadratic utility."""

    n_assets: int
    lam: float = 10.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"risk aversion must be positive, got {self.lam}")
        if self.n_assets < 1:
            raise ValueError("n_assets must be >= 1")


def utility(pi, lam):
    return pi - 0.5 * lam * pi * pi


def _scenarios(scenarios):
    R = np.asarray(scenarios, dtype=float)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ValueError(f"scenario matrix must be non-empty (N, d), got shape {R.shape}")
    return R


def empirical_utility(w, scenarios, lam):
    """Mean utility of portfolio ``w`` over the rows of ``scenarios``."""
    R = _scenarios(scenarios)
    return float(np.mean(utility(R @ w, lam)))


def grad_w(w, scenarios, lam):
    """Gradient of :func:`empirical_utility` with respect to ``w``."""
    R = _scenarios(scenarios)
    pi = R @ w
    return (1.0 - lam * pi) @ R / R.shape[0]


def grad_y(w, y, lam):
    """Gradient of ``u(y . w)`` with respect to the outcome ``y``."""
    w = np.asarray(w, dtype=float)
    return (1.0 - lam * float(np.dot(y, w))) * w
