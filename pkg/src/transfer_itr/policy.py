"""Scikit-learn style learner for calibrated linear treatment rules."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, column_or_1d

from .calibration import EntropyBalancer
from .exceptions import DataError
from .ga import GAConfig, optimize_itr
from .glm import DEFAULT_CLIP, fit_nuisance
from .itr import LinearITR, apply_itr, unstandardize_eta
from .value import CAIPWObjective, caipw_value


class CAIPWPolicyLearner(BaseEstimator):
    """Learn the linear rule maximizing the calibrated AIPW value.

    ``fit`` estimates the propensity (logistic) and outcome (linear) models
    on the source sample, computes entropy-balancing weights towards the
    target covariates when ``X_target`` is given and ``calibrate`` is true,
    and searches rule coefficients with a genetic algorithm. The search runs
    on covariates standardized by the source mean and sd; the stored
    ``rule_`` acts on raw covariates.

    Parameters
    ----------
    calibrate : bool, default=True
        Use calibration weights; with ``False`` (or no target sample) the
        source units are weighted uniformly.
    moments : {1, 2}, default=1
        Moments matched by entropy balancing.
    calibration_tol : float, default=1e-8
    clip : float, default=0.01
        Propensity clipping level.
    arm_specific : bool, default=False
        Fit one outcome model per arm instead of one pooled model.
    weighted_nuisance : bool, default=False
        Fit the nuisance models with the calibration weights.
    ga_config : GAConfig, optional
    feature_names : sequence of str, optional

    Attributes
    ----------
    rule_ : LinearITR
    value_ : float
        CAIPW value of ``rule_`` on the training data.
    weights_ : ndarray of shape (n_source,)
    nuisance_ : NuisanceModels
    ga_result_ : GAResult
    balancer_ : EntropyBalancer or None
    """

    def __init__(self, calibrate=True, moments=1, calibration_tol=1e-8, clip=DEFAULT_CLIP,
                 arm_specific=False, weighted_nuisance=False, ga_config=None, feature_names=None):
        self.calibrate = calibrate
        self.moments = moments
        self.calibration_tol = calibration_tol
        self.clip = clip
        self.arm_specific = arm_specific
        self.weighted_nuisance = weighted_nuisance
        self.ga_config = ga_config
        self.feature_names = feature_names

    def fit(self, X, treatment, outcome, X_target=None):
        X = check_array(X)
        a = column_or_1d(treatment).astype(float)
        y = column_or_1d(outcome).astype(float)
        n, p = X.shape
        if a.shape[0] != n or y.shape[0] != n:
            raise DataError("X, treatment and outcome must have the same number of rows")
        names = list(self.feature_names) if self.feature_names is not None else [f"x{j}" for j in range(p)]
        if len(names) != p:
            raise DataError(f"{len(names)} feature names for {p} covariates")

        self.balancer_ = None
        if self.calibrate and X_target is not None:
            self.balancer_ = EntropyBalancer(order=self.moments, tol=self.calibration_tol)
            self.balancer_.fit(X, X_target, feature_names=names)
            w = self.balancer_.weights_
        else:
            w = np.full(n, 1.0 / n)
        self.weights_ = w

        sample_weight = w * n if (self.weighted_nuisance and self.balancer_ is not None) else None
        self.nuisance_ = fit_nuisance(
            X, a, y, clip=self.clip, arm_specific=self.arm_specific,
            sample_weight=sample_weight, names=names,
        )
        self.pi_hat_ = self.nuisance_.pi_hat(X)
        self.m_hat_ = self.nuisance_.m_hat(X)
        weights = w if self.balancer_ is not None else None
        objective = CAIPWObjective(X, a, y, weights, self.pi_hat_, self.m_hat_)
        self.ga_result_ = optimize_itr(objective, p, self.ga_config or GAConfig())
        eta = unstandardize_eta(self.ga_result_.best_eta, objective.center, objective.scale)
        self.rule_ = LinearITR(eta, names)
        self.standardization_ = (objective.center, objective.scale)
        self.value_ = caipw_value(self.rule_, X, a, y, weights, self.pi_hat_, self.m_hat_).value
        self.n_features_in_ = p
        return self

    def predict(self, X):
        """Recommended treatment (0/1) for each row of ``X``."""
        check_is_fitted(self, "rule_")
        return apply_itr(self.rule_, check_array(X))

    def decision_function(self, X):
        check_is_fitted(self, "rule_")
        return self.rule_.score(check_array(X))
