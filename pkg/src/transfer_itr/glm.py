"""Nuisance models: least squares outcome regression and IRLS logistic propensity.

Coefficient vectors put the intercept last, matching the ``[x, 1]``
augmentation used by treatment rules.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.multiclass import check_classification_targets, type_of_target
from sklearn.utils.validation import check_is_fitted, validate_data

from .exceptions import DataError, RankDeficientError, SeparationError

DEFAULT_CLIP = 0.01


def add_intercept(X):
    X = np.asarray(X, dtype=float)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _column_labels(p, names):
    if names is None:
        names = [f"x{j}" for j in range(p)]
    return [*names, "intercept"]


def dependent_columns(D, names, rtol=1e-10):
    """Columns of ``D`` involved in a linear dependency, via pivoted QR.

    Returns an empty list for full column rank. Otherwise each column outside
    the numerical rank is listed together with the basis columns it is a
    combination of.
    """
    _, R, piv = scipy.linalg.qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return list(names)
    rank = int(np.sum(diag > rtol * diag[0]))
    if rank == D.shape[1]:
        return []
    # express each dropped column in terms of the retained basis
    coef = scipy.linalg.solve_triangular(R[:rank, :rank], R[:rank, rank:])
    involved = set(piv[rank:].tolist())
    for j in range(coef.shape[1]):
        involved.update(piv[:rank][np.abs(coef[:, j]) > 1e-8].tolist())
    return [names[j] for j in sorted(involved)]


def _check_rank(D, names, rtol=1e-10):
    """Raise naming the linearly dependent columns of the design ``D``."""
    dependent = dependent_columns(D, names, rtol)
    if dependent:
        raise RankDeficientError(
            f"design matrix is rank deficient; linearly dependent columns: {dependent}",
            dependent,
        )


@dataclass(frozen=True)
class LinearModel:
    coefficients: np.ndarray
    residual_variance: float

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.coefficients.size - 1:
            raise DataError(
                f"expected {self.coefficients.size - 1} covariates, got shape {X.shape}"
            )
        return X @ self.coefficients[:-1] + self.coefficients[-1]

    def to_dict(self):
        return {
            "coefficients": self.coefficients.tolist(),
            "residual_variance": self.residual_variance,
        }


def fit_linear(X, y, weights=None, ridge=0.0, names: Optional[Sequence[str]] = None) -> LinearModel:
    """(Weighted) least squares with an intercept, solved by pivoted QR.

    Parameters
    ----------
    X : array-like of shape (n, p)
    y : array-like of shape (n,)
    weights : array-like of shape (n,), optional
        Nonnegative observation weights, not all zero.
    ridge : float, default=0.0
        L2 penalty on the slope coefficients (intercept unpenalized).
    names : sequence of str, optional
        Covariate labels used in rank-deficiency errors.

    Raises
    ------
    RankDeficientError
        If the design has linearly dependent columns and ``ridge == 0``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.shape[0] != n:
        raise DataError(f"X has {n} rows but y has {y.shape[0]}")
    if n <= p + 1:
        raise DataError(f"need n_samples > p + 1, got n_samples={n}, p={p}")
    D = add_intercept(X)
    if weights is None:
        sw = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != n:
            raise DataError(f"weights have length {w.shape[0]}, expected {n}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and nonnegative")
        if not np.any(w > 0):
            raise DataError("weights are all zero")
        # uniform weights reduce to exactly 1.0, reproducing the unweighted fit
        sw = np.sqrt(w / w.max())
    Dw = D * sw[:, None]
    yw = y * sw
    labels = _column_labels(p, names)
    if ridge > 0:
        pen = np.sqrt(ridge) * np.eye(p + 1)[:p]
        Dw = np.vstack([Dw, pen])
        yw = np.concatenate([yw, np.zeros(p)])
    else:
        _check_rank(Dw, labels)
    Q, R, piv = scipy.linalg.qr(Dw, mode="economic", pivoting=True)
    beta_piv = scipy.linalg.solve_triangular(R, Q.T @ yw)
    beta = np.empty(p + 1)
    beta[piv] = beta_piv
    resid = (y - D @ beta) * sw
    sw2 = sw**2
    rss = float(np.sum(resid**2))
    dof = n - p - 1
    resid_var = rss / np.sum(sw2) * n / dof
    return LinearModel(coefficients=beta, residual_variance=float(resid_var))


@dataclass(frozen=True)
class LogisticModel:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    gradient: np.ndarray = field(default=None)

    def decision_function(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.coefficients.size - 1:
            raise DataError(
                f"expected {self.coefficients.size - 1} covariates, got shape {X.shape}"
            )
        return X @ self.coefficients[:-1] + self.coefficients[-1]

    def to_dict(self):
        return {
            "coefficients": self.coefficients.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_gradient": float(np.max(np.abs(self.gradient))),
        }


def log_likelihood(beta, X, a, ridge=0.0, weights=None):
    """Bernoulli log-likelihood of a logistic model (minus the ridge penalty)."""
    eta = add_intercept(X) @ beta
    terms = a * log_expit(eta) + (1 - a) * log_expit(-eta)
    ll = np.sum(terms if weights is None else weights * terms)
    return float(ll - 0.5 * ridge * np.sum(beta[:-1] ** 2))


def score(beta, X, a, ridge=0.0, weights=None):
    """Gradient of :func:`log_likelihood` with respect to ``beta``."""
    D = add_intercept(X)
    r = a - expit(D @ beta)
    g = D.T @ (r if weights is None else weights * r)
    g[:-1] -= ridge * beta[:-1]
    return g


def fit_logistic(X, a, tol=1e-8, max_iter=100, ridge=0.0, max_norm=1e3,
                 names: Optional[Sequence[str]] = None, weights=None) -> LogisticModel:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    Iterates Newton steps (with step halving if the likelihood drops) until
    the score's max-norm is below ``tol`` or ``max_iter`` is reached.

    Raises
    ------
    DataError
        If ``a`` is not binary or contains a single class.
    SeparationError
        If the coefficient norm exceeds ``max_norm``; refit with ``ridge > 0``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    a = np.asarray(a, dtype=float).reshape(-1)
    n, p = X.shape
    if a.shape[0] != n:
        raise DataError(f"X has {n} rows but a has {a.shape[0]}")
    if np.any((a != 0) & (a != 1)):
        raise DataError("logistic response must be 0/1")
    if np.all(a == a[0]):
        raise DataError("single-class response (only one class present): both treatment arms are required")
    if n <= p + 1:
        raise DataError(f"need n_samples > p + 1, got n_samples={n}, p={p}")
    if weights is not None:
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.shape[0] != n or np.any(weights < 0) or not np.any(weights > 0):
            raise DataError("weights must be nonnegative, length n, and not all zero")
    D = add_intercept(X)
    if ridge == 0:
        _check_rank(D, _column_labels(p, names))
    penalty = np.full(p + 1, ridge)
    penalty[-1] = 0.0

    beta = np.zeros(p + 1)
    ll = log_likelihood(beta, X, a, ridge, weights)
    g = score(beta, X, a, ridge, weights)
    it = 0
    converged = bool(np.max(np.abs(g)) < tol)
    while not converged and it < max_iter:
        it += 1
        mu = expit(D @ beta)
        W = mu * (1 - mu)
        if weights is not None:
            W = W * weights
        H = (D * W[:, None]).T @ D + np.diag(penalty)
        try:
            step = scipy.linalg.solve(H, g, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_new = log_likelihood(cand, X, a, ridge, weights)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        stalled = np.array_equal(cand, beta)
        beta, ll = cand, ll_new
        if np.linalg.norm(beta[:-1]) > max_norm:
            raise SeparationError(
                f"logistic coefficients diverged (norm > {max_norm:g}); the data look "
                "(quasi-)separable, refit with a ridge penalty"
            )
        g = score(beta, X, a, ridge, weights)
        converged = bool(np.max(np.abs(g)) < tol)
        if stalled:
            break
    # the score can vanish numerically once probabilities saturate, so extreme
    # fits are checked for separation directly
    if ridge == 0 and np.max(np.abs(D @ beta)) > 30 and is_separated(D, a):
        raise SeparationError(
            "logistic coefficients diverge: the data are (quasi-)separable, "
            "refit with a ridge penalty"
        )
    return LogisticModel(coefficients=beta, converged=converged, iterations=it, gradient=g)


def is_separated(D, a):
    """Whether some nonzero ``b`` has ``(2a - 1) * (D @ b) >= 0`` for every row.

    Solved as a linear program; a positive optimum means the maximum
    likelihood estimate does not exist.
    """
    s = 2.0 * np.asarray(a, dtype=float) - 1.0
    SD = D * s[:, None]
    res = scipy.optimize.linprog(
        -SD.sum(axis=0),
        A_ub=-SD,
        b_ub=np.zeros(len(s)),
        bounds=[(-1, 1)] * D.shape[1],
        method="highs",
    )
    return bool(res.status == 0 and -res.fun > 1e-8)


def predict_proba(model: LogisticModel, X, clip=DEFAULT_CLIP):
    """Fitted probabilities clipped to ``[clip, 1 - clip]``."""
    if not 0 < clip < 0.5:
        raise ValueError(f"clip must lie in (0, 0.5), got {clip}")
    return np.clip(expit(model.decision_function(X)), clip, 1 - clip)


class OLSRegressor(RegressorMixin, BaseEstimator):
    """Least squares outcome model with the scikit-learn estimator interface."""

    def __init__(self, ridge=0.0):
        self.ridge = ridge

    def fit(self, X, y, sample_weight=None):
        X, y = validate_data(self, X, y, y_numeric=True)
        self.model_ = fit_linear(X, y, weights=sample_weight, ridge=self.ridge)
        self.coef_ = self.model_.coefficients[:-1]
        self.intercept_ = self.model_.coefficients[-1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(validate_data(self, X, reset=False))


class IRLSLogisticRegression(ClassifierMixin, BaseEstimator):
    """Unpenalized (by default) binary logistic regression fit by IRLS.

    Parameters
    ----------
    clip : float, default=0.01
        Probabilities from :meth:`predict_proba` are clipped to ``[clip, 1 - clip]``.
    tol : float, default=1e-8
        Convergence threshold on the max-norm of the score.
    max_iter : int, default=100
    ridge : float, default=0.0
        Optional L2 penalty for separable data.
    """

    def __init__(self, clip=DEFAULT_CLIP, tol=1e-8, max_iter=100, ridge=0.0):
        self.clip = clip
        self.tol = tol
        self.max_iter = max_iter
        self.ridge = ridge

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.classifier_tags.multi_class = False
        return tags

    def fit(self, X, y):
        X, y = validate_data(self, X, y)
        check_classification_targets(y)
        y_type = type_of_target(y, input_name="y", raise_unknown=True)
        if y_type != "binary":
            raise ValueError(
                f"Only binary classification is supported. The type of the target is {y_type}."
            )
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.model_ = fit_logistic(X, encoded, tol=self.tol, max_iter=self.max_iter, ridge=self.ridge)
        self.coef_ = self.model_.coefficients[:-1]
        self.intercept_ = self.model_.coefficients[-1]
        self.n_iter_ = self.model_.iterations
        self.converged_ = self.model_.converged
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(validate_data(self, X, reset=False))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p1 = predict_proba(self.model_, validate_data(self, X, reset=False), clip=self.clip)
        return np.column_stack([1 - p1, p1])

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[(scores > 0).astype(int)]


@dataclass(frozen=True)
class NuisanceModels:
    """Fitted propensity and outcome models used by the value function.

    ``outcome`` holds one pooled model, or ``(control, treated)`` models when
    fitted arm-specifically.
    """

    propensity: LogisticModel
    outcome: tuple
    clip: float = DEFAULT_CLIP
    arm_specific: bool = False
    weighted: bool = False

    def pi_hat(self, X):
        return predict_proba(self.propensity, X, clip=self.clip)

    def m_hat(self, X):
        """Outcome predictions: shape (n,) if pooled, (2, n) as (control, treated) otherwise."""
        if self.arm_specific:
            return np.vstack([self.outcome[0].predict(X), self.outcome[1].predict(X)])
        return self.outcome[0].predict(X)

    def positivity(self, X):
        """Share of units whose raw propensity falls outside ``[clip, 1 - clip]``."""
        raw = expit(self.propensity.decision_function(X))
        low = raw < self.clip
        high = raw > 1 - self.clip
        return {
            "clip": self.clip,
            "min_propensity": float(raw.min()),
            "max_propensity": float(raw.max()),
            "fraction_clipped": float(np.mean(low | high)),
        }

    def to_dict(self):
        return {
            "propensity": self.propensity.to_dict(),
            "outcome": [m.to_dict() for m in self.outcome],
            "clip": self.clip,
            "arm_specific": self.arm_specific,
            "weighted": self.weighted,
        }


def fit_nuisance(X, a, y, clip=DEFAULT_CLIP, arm_specific=False, sample_weight=None,
                 ridge=0.0, names=None) -> NuisanceModels:
    """Fit the propensity model and the (pooled or per-arm) outcome model on source data."""
    X = np.asarray(X, dtype=float)
    a = np.asarray(a)
    y = np.asarray(y, dtype=float)
    prop = fit_logistic(X, a, ridge=ridge, names=names, weights=sample_weight)
    if arm_specific:
        outcome = []
        for arm in (0, 1):
            mask = a == arm
            w = None if sample_weight is None else np.asarray(sample_weight)[mask]
            outcome.append(fit_linear(X[mask], y[mask], weights=w, ridge=ridge, names=names))
        outcome = tuple(outcome)
    else:
        outcome = (fit_linear(X, y, weights=sample_weight, ridge=ridge, names=names),)
    return NuisanceModels(
        propensity=prop,
        outcome=outcome,
        clip=clip,
        arm_specific=arm_specific,
        weighted=sample_weight is not None,
    )
