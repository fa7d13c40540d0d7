"""Sampler-robust optimization: decisions that hold up under perturbed generators."""

from .certificate import (CertificateReport, certificate_constants, classify_regime, coverage_check,
                          gaps, oracle_utility, slack_estimate)
from .generators import (GeneratorSpec, LatentBatch, calibrate_affine, forward, sample_batch,
                         vjp_theta)
from .geometry import PerturbationBall, ball_membership, dual_norm_step, project_ball, project_simplex
from .losses import DecisionProblem, empirical_utility, grad_w, grad_y, utility
from .solvers import (RobustConfig, SolveTrace, robust_objective, sharpness, solve_nominal,
                      solve_sro_first_order, solve_sro_two_timescale)

__all__ = [
    "CertificateReport", "certificate_constants", "classify_regime", "coverage_check", "gaps",
    "oracle_utility", "slack_estimate", "GeneratorSpec", "LatentBatch", "calibrate_affine",
    "forward", "sample_batch", "vjp_theta", "PerturbationBall", "ball_membership", "dual_norm_step",
    "project_ball", "project_simplex", "DecisionProblem", "empirical_utility", "grad_w", "grad_y",
    "utility", "RobustConfig", "SolveTrace", "robust_objective", "sharpness", "solve_nominal",
    "solve_sro_first_order", "solve_sro_two_timescale",
]

__version__ = "0.1.0"
