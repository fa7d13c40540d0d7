"""Out-of-sample performance metrics and seed aggregation."""

from __future__ import annotations

import math

import numpy as np

METRIC_NAMES = ("mean", "std", "sharpe", "cvar5", "mdd")


def realized_return(w, r_next):
    """Net simple return of ``w`` given next-period log returns."""
    return float(np.dot(w, np.exp(np.asarray(r_next, dtype=float))) - 1.0)


def cvar(returns, level=0.05):
    r = np.sort(np.asarray(returns, dtype=float))
    k = math.ceil(level * len(r))
    return float(r[:k].mean())


def max_drawdown(returns):
    """Largest peak-to-trough wealth decline as a fraction of the peak; wealth starts at 1."""
    wealth = np.cumprod(1.0 + np.asarray(returns, dtype=float))
    peak = np.maximum.accumulate(np.concatenate([[1.0], wealth]))[1:]
    return float(np.max((peak - wealth) / peak))


def metrics(returns):
    """Per-period mean, sample std, Sharpe (no annualization), CVaR(5%), MDD.

    Sharpe is ``None`` when the std is zero.
    """
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("metrics need at least 2 returns")
    mean = float(r.mean())
    std = 0.0 if np.ptp(r) == 0 else float(r.std(ddof=1))
    return {
        "mean": mean,
        "std": std,
        "sharpe": mean / std if std > 0 else None,
        "cvar5": cvar(r, 0.05),
        "mdd": max_drawdown(r),
    }


def aggregate(rows, keys):
    """Mean and sample std across seeds for each key, skipping missing values."""
    out = {}
    for key in keys:
        vals = np.array([r[key] for r in rows if r.get(key) is not None], dtype=float)
        n = len(vals)
        out[key] = {
            "mean": float(vals.mean()) if n else None,
            "std": float(vals.std(ddof=1)) if n > 1 else None,
            "n": n,
        }
    return out
