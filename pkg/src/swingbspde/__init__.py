"""Swing options with a rate cap: lattice DP, BSPDE verification, Monte-Carlo bounds."""
from .estimator import SwingValueEstimator
from .model import (
    LatticeModel,
    ModelParams,
    TimeGrid,
    VolumeGrid,
    build_model,
    parse_model_config,
    validate,
)
from .montecarlo import DualReport, PolicyTable, dual_bound, extract_policy, price, simulate_primal
from .solver import ValueSurface, marginal_left, solve_dp, unconstrained_values
from .verify import ResidualReport, bspde_residual, chain_rule_check, run_all

__all__ = [
    "DualReport", "LatticeModel", "ModelParams", "PolicyTable", "ResidualReport",
    "SwingValueEstimator", "TimeGrid", "ValueSurface", "VolumeGrid", "bspde_residual",
    "build_model", "chain_rule_check", "dual_bound", "extract_policy", "marginal_left",
    "parse_model_config", "price", "run_all", "simulate_primal", "solve_dp",
    "unconstrained_values", "validate",
]
