"""Post-calibration validity screen (moment-based collapse check)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..generators import sample_batch

MIN_STD_RATIO = 0.1
MAX_MEAN_SHIFT = 5.0
# observed std at or below this is float noise on log returns: nothing can collapse
FLAT_STD = 1e-12


@dataclass
class ScreenResult:
    passed: bool
    gen_mean: list
    gen_std: list
    obs_mean: list
    obs_std: list
    reasons: list

    def to_dict(self):
        return dict(self.__dict__)


def validity_screen(gen, observed, contexts, seed=0):
    """Compare one generated draw per training context with the observed targets.

    Fails when any asset's generated std is not strictly above 10% of the
    observed std, or its mean is more than 5 observed stds away. Assets whose
    observed series is flat skip the std test.
    """
    obs = np.asarray(observed, dtype=float)
    X = np.asarray(contexts, dtype=float)
    Z = sample_batch(seed, len(X), gen.latent_dim).draws
    sim = np.array([gen.forward_batch(Z[i:i + 1], X[i])[0] for i in range(len(X))])
    g_mean, g_std = sim.mean(axis=0), sim.std(axis=0, ddof=1)
    o_mean, o_std = obs.mean(axis=0), obs.std(axis=0, ddof=1)
    reasons = []
    ok_std, ok_mean = _checks(g_mean, g_std, o_mean, o_std)
    for j in range(obs.shape[1]):
        if not ok_std[j]:
            reasons.append(f"asset {j}: generated std {g_std[j]:.3g} <= 10% of observed {o_std[j]:.3g}")
        if not ok_mean[j]:
            reasons.append(f"asset {j}: mean shift {g_mean[j] - o_mean[j]:.3g} exceeds 5 observed stds")
    return ScreenResult(not reasons, g_mean.tolist(), g_std.tolist(), o_mean.tolist(),
                        o_std.tolist(), reasons)


def _checks(gen_mean, gen_std, obs_mean, obs_std):
    g_mean, g_std, o_mean, o_std = (np.asarray(v, dtype=float) for v in
                                    (gen_mean, gen_std, obs_mean, obs_std))
    flat = o_std <= FLAT_STD
    ok_std = flat | (g_std > MIN_STD_RATIO * o_std)
    ok_mean = np.abs(g_mean - o_mean) <= np.maximum(MAX_MEAN_SHIFT * o_std, FLAT_STD)
    return ok_std, ok_mean


def screen_from_moments(gen_mean, gen_std, obs_mean, obs_std):
    """Same decision rule applied to precomputed moments."""
    ok_std, ok_mean = _checks(gen_mean, gen_std, obs_mean, obs_std)
    return bool(np.all(ok_std & ok_mean))
