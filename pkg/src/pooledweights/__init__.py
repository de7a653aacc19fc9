"""Partially pooled approximate balancing weights for subgroup treatment effects."""

__version__ = "0.1.0"

from .data import AnalysisSample, FeatureMatrix, FeatureSpec, Schema, build_features, load_csv
from .diagnostics import balance_report, ess
from .estimators import (
    EstimateTable,
    augment,
    fit_outcome_ridge,
    fit_propensity,
    ipw_weights,
    linear_regression_baseline,
    sandwich_se,
    weighted_means,
)
from .errors import InfeasibleBalanceError, PooledWeightsError
from .solver import DualParams, SolverConfig, WeightSolution, solve, sweep_lambda

__all__ = [
    "AnalysisSample",
    "DualParams",
    "EstimateTable",
    "FeatureMatrix",
    "FeatureSpec",
    "InfeasibleBalanceError",
    "PooledWeightsError",
    "Schema",
    "SolverConfig",
    "WeightSolution",
    "augment",
    "balance_report",
    "build_features",
    "ess",
    "fit_outcome_ridge",
    "fit_propensity",
    "ipw_weights",
    "linear_regression_baseline",
    "load_csv",
    "sandwich_se",
    "solve",
    "sweep_lambda",
    "weighted_means",
]
