"""Average treatment effects with confounders missing not at random.

Missingness may depend on treatment and on the confounders themselves but
not on the outcome. The package offers exact identification on finite
supports, a nonparametric series estimator, a parametric fractional
imputation estimator and a Monte Carlo harness.
"""

from .data import Dataset, Pattern, PatternIndex, index_patterns, load_csv, split_by_pattern, write_csv
from .discrete import DiscreteJoint, check_identifiability, discrete_tau, identify, recover_joint, solve_xi
from .estimators import (
    DifferenceInMeans,
    EstimateResult,
    EstimationError,
    NonparametricATE,
    ParametricATE,
    PropensityWeightingATE,
    bootstrap_ci,
    cate_complete_case,
    estimate_with_ci,
    gpsw,
    nonpara_tau,
    para_tau,
    unadjusted,
)
from .parametric import ConvergenceError, ParamModelSpec, ParamTheta, fit_mle_fractional, param_tau
from .simulation import ScenarioConfig, generate, run_monte_carlo, sensitivity_grid, true_tau

__all__ = [
    "ConvergenceError",
    "Dataset",
    "DifferenceInMeans",
    "DiscreteJoint",
    "EstimateResult",
    "EstimationError",
    "NonparametricATE",
    "ParamModelSpec",
    "ParamTheta",
    "ParametricATE",
    "Pattern",
    "PatternIndex",
    "PropensityWeightingATE",
    "ScenarioConfig",
    "bootstrap_ci",
    "cate_complete_case",
    "check_identifiability",
    "discrete_tau",
    "estimate_with_ci",
    "fit_mle_fractional",
    "generate",
    "gpsw",
    "identify",
    "index_patterns",
    "load_csv",
    "nonpara_tau",
    "para_tau",
    "param_tau",
    "recover_joint",
    "run_monte_carlo",
    "sensitivity_grid",
    "solve_xi",
    "split_by_pattern",
    "true_tau",
    "unadjusted",
    "write_csv",
]

__version__ = "0.1.0"
