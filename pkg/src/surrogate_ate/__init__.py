"""Surrogate-assisted average treatment effect estimation with missing primary outcomes."""

__version__ = "0.1.0"

from .bounds import BoundRequest, BoundSet, BoundValue, available_bounds, compute_bounds
from .crossfit import CrossFitPlan, FitCache, LearnerSet, NuisanceFits, cross_fit
from .data import Dataset, FoldAssignment, Observation, dataset_split_counts, make_folds, read_dataset, write_dataset
from .dgp import DgpSpec, Family, TrueNuisances, TruthReport, generate, lg1, mcar, truth
from .estimators import (EstimateReport, EstimatorConfig, EstimatorKind, InfluenceKind, Scale, estimate,
                         eval_psi_general, eval_psi_setting, eval_psi_tilde, variance_and_ci)
from .harness import (MetricsReport, ScenarioConfig, misspecification_matrix, regime_sweep, run_scenario,
                      zb_comparison)
from .learners import LearnerKind, LearnerSpec, boosted, logistic, omit, ridge
from .nuisance import fit_binary_propensity, fit_density_ratio, fit_mu_pair, fit_regression

__all__ = [
    "BoundRequest", "BoundSet", "BoundValue", "CrossFitPlan", "Dataset", "DgpSpec", "EstimateReport",
    "EstimatorConfig", "EstimatorKind", "Family", "FitCache", "FoldAssignment", "InfluenceKind", "LearnerKind",
    "LearnerSet", "LearnerSpec", "MetricsReport", "NuisanceFits", "Observation", "Scale", "ScenarioConfig",
    "TrueNuisances", "TruthReport", "available_bounds", "boosted", "compute_bounds", "cross_fit",
    "dataset_split_counts", "estimate", "eval_psi_general", "eval_psi_setting", "eval_psi_tilde",
    "fit_binary_propensity", "fit_density_ratio", "fit_mu_pair", "fit_regression", "generate", "lg1", "logistic",
    "make_folds", "mcar", "misspecification_matrix", "omit", "read_dataset", "regime_sweep", "ridge",
    "run_scenario", "truth", "variance_and_ci", "write_dataset", "zb_comparison",
]
