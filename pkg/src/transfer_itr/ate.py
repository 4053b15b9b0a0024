"""Average treatment effect estimators: naive, IPW, outcome regression and AIPW.

Each estimator reports both arm means and their difference. Nuisance
quantities (propensities, outcome predictions) are passed in rather than
fitted here, so deliberately misspecified models can be substituted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataError

METHODS = ("naive", "ipw", "or", "aipw")


@dataclass(frozen=True)
class AteEstimate:
    method: str
    treated_mean: float
    control_mean: float
    n_used: int

    @property
    def tau_hat(self):
        return self.treated_mean - self.control_mean

    @property
    def arm_means(self):
        return (self.treated_mean, self.control_mean)

    def to_dict(self):
        return {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "treated_mean": self.treated_mean,
            "control_mean": self.control_mean,
            "n_used": self.n_used,
        }


def _vec(x, n, name):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != n:
        raise DataError(f"{name} has length {x.shape[0]}, expected {n}")
    return x


def _ay(a, y):
    y = np.asarray(y, dtype=float).reshape(-1)
    a = _vec(a, y.shape[0], "treatment")
    if np.any((a != 0) & (a != 1)):
        raise DataError("treatment must be 0/1")
    return a, y


def _predictions(model, X, n, name):
    """Accept either an array of predictions or a fitted object with ``predict``."""
    if hasattr(model, "predict"):
        if X is None:
            raise DataError(f"{name} is a model; covariates X are required to evaluate it")
        try:
            pred = model.predict(X)
        except Exception as exc:  # e.g. sklearn NotFittedError
            raise DataError(f"{name} could not be evaluated: {exc}") from exc
        return _vec(pred, n, name)
    if callable(model):
        return _vec(model(X), n, name)
    if model is None:
        raise DataError(f"{name} is missing")
    m = np.asarray(model, dtype=float)
    if m.ndim == 0:
        return np.full(n, float(m))
    return _vec(m, n, name)


def naive_ate(a, y) -> AteEstimate:
    """Difference in observed mean outcomes between the treated and control arms."""
    a, y = _ay(a, y)
    treated = a == 1
    n1, n0 = int(treated.sum()), int((~treated).sum())
    if n1 == 0 or n0 == 0:
        raise DataError("naive estimator needs both arms to be nonempty")
    return AteEstimate("naive", float(y[treated].mean()), float(y[~treated].mean()), y.size)


def ipw_ate(a, y, pi_hat) -> AteEstimate:
    """Horvitz-Thompson inverse probability weighting.

    Treated mean ``(1/n) Σ A Y / π̂``; control mean is the mirror
    ``(1/n) Σ (1 - A) Y / (1 - π̂)``.
    """
    a, y = _ay(a, y)
    pi = _vec(pi_hat, y.size, "pi_hat")
    if np.any((pi <= 0) | (pi >= 1)):
        raise DataError("propensities must lie strictly inside (0, 1); clip them first")
    treated = np.mean(a * y / pi)
    control = np.mean((1 - a) * y / (1 - pi))
    return AteEstimate("ipw", float(treated), float(control), y.size)


def or_ate(m1, m0, X=None, n=None) -> AteEstimate:
    """Outcome-regression (g-computation) estimator ``mean(m̂₁) - mean(m̂₀)``.

    ``m1``/``m0`` may be fitted models (evaluated at ``X``), callables, or
    precomputed prediction arrays.
    """
    if n is None:
        if X is not None:
            n = np.asarray(X).shape[0]
        else:
            n = np.asarray(m1).size if np.ndim(m1) else np.asarray(m0).size
    if not n:
        raise DataError("cannot infer the number of units for the outcome-regression estimator")
    mu1 = _predictions(m1, X, n, "m1")
    mu0 = _predictions(m0, X, n, "m0")
    return AteEstimate("or", float(np.mean(mu1)), float(np.mean(mu0)), n)


def aipw_ate(a, y, pi_hat, m1, m0, X=None) -> AteEstimate:
    """Augmented IPW (doubly robust) estimator.

    Treated mean ``(1/n) Σ [A (Y - m̂₁) / π̂ + m̂₁]``, control mean
    ``(1/n) Σ [(1 - A)(Y - m̂₀) / (1 - π̂) + m̂₀]``. Consistent if either the
    propensity model or the outcome models are correctly specified.
    """
    a, y = _ay(a, y)
    n = y.size
    pi = _vec(pi_hat, n, "pi_hat")
    if np.any((pi <= 0) | (pi >= 1)):
        raise DataError("propensities must lie strictly inside (0, 1); clip them first")
    mu1 = _predictions(m1, X, n, "m1")
    mu0 = _predictions(m0, X, n, "m0")
    treated = np.mean(a * (y - mu1) / pi + mu1)
    control = np.mean((1 - a) * (y - mu0) / (1 - pi) + mu0)
    return AteEstimate("aipw", float(treated), float(control), n)


def aipw_ate_ipw_form(a, y, pi_hat, m1, m0) -> AteEstimate:
    """AIPW written as IPW minus a correction: ``A Y / π̂ - (A - π̂) m̂₁ / π̂`` per unit.

    Algebraically identical to :func:`aipw_ate`; kept to check the identity.
    """
    a, y = _ay(a, y)
    n = y.size
    pi = _vec(pi_hat, n, "pi_hat")
    mu1 = _predictions(m1, None, n, "m1")
    mu0 = _predictions(m0, None, n, "m0")
    treated = np.mean(a * y / pi - (a - pi) / pi * mu1)
    control = np.mean((1 - a) * y / (1 - pi) - ((1 - a) - (1 - pi)) / (1 - pi) * mu0)
    return AteEstimate("aipw", float(treated), float(control), n)


def estimate_all(X, a, y, pi_hat, m1, m0):
    """All four estimators on the same source sample, keyed by method name."""
    return {
        "naive": naive_ate(a, y),
        "ipw": ipw_ate(a, y, pi_hat),
        "or": or_ate(m1, m0, X=X, n=len(y)),
        "aipw": aipw_ate(a, y, pi_hat, m1, m0, X=X),
    }
