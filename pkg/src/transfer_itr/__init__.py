"""Transfer learning of linear individualized treatment rules.

Entropy-balancing calibration weights carry a source sample (e.g. a trial)
over to a target population; a calibrated AIPW value function scores
candidate rules; a genetic algorithm searches for the best one.
"""
from .ate import AteEstimate, aipw_ate, ipw_ate, naive_ate, or_ate
from .calibration import (
    CalibrationWeights,
    EntropyBalancer,
    MomentTargets,
    balance_diagnostics,
    solve_entropy_balance,
    target_moments,
)
from .data import CovariateSummary, Dataset, Schema, covariate_summary, load_dataset, validate, write_dataset
from .ga import GAConfig, GAResult, evolve_generation, optimize_itr
from .glm import IRLSLogisticRegression, OLSRegressor, fit_linear, fit_logistic, predict_proba
from .itr import LinearITR, apply_itr, covariate_importance
from .policy import CAIPWPolicyLearner
from .value import CAIPWObjective, ValueEstimate, caipw_value

__version__ = "0.1.0"

__all__ = [
    "AteEstimate", "aipw_ate", "ipw_ate", "naive_ate", "or_ate",
    "CalibrationWeights", "EntropyBalancer", "MomentTargets", "balance_diagnostics",
    "solve_entropy_balance", "target_moments",
    "CovariateSummary", "Dataset", "Schema", "covariate_summary", "load_dataset", "validate",
    "write_dataset",
    "GAConfig", "GAResult", "evolve_generation", "optimize_itr",
    "IRLSLogisticRegression", "OLSRegressor", "fit_linear", "fit_logistic", "predict_proba",
    "LinearITR", "apply_itr", "covariate_importance",
    "CAIPWPolicyLearner",
    "CAIPWObjective", "ValueEstimate", "caipw_value",
]
