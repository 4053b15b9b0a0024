"""Calibrated AIPW (CAIPW) estimate of the mean outcome under a treatment rule.

For a rule ``d`` the estimate is

    V(d) = Σ_i w_i ( [A_i d_i / π_i + (1 - A_i)(1 - d_i) / (1 - π_i)] (Y_i - m_i) + m_i )

summed over source units, where ``w`` are calibration weights that make the
source sample resemble the target population (uniform weights give the
plain AIPW value on the source population).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .exceptions import DataError
from .itr import LinearITR, apply_itr, decide

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    rule: LinearITR
    weighted: bool
    n_source_used: int

    def to_dict(self):
        return {
            "value": self.value,
            "rule": self.rule.to_dict(),
            "weighted": self.weighted,
            "n_source_used": self.n_source_used,
        }


def _check_inputs(X, a, y, weights, pi_hat, m_hat):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    a = np.asarray(a, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    pi = np.asarray(pi_hat, dtype=float).reshape(-1)
    for name, v in (("treatment", a), ("outcome", y), ("pi_hat", pi)):
        if v.shape[0] != n:
            raise DataError(f"{name} has length {v.shape[0]}, expected {n}")
    if np.any((a != 0) & (a != 1)):
        raise DataError("treatment must be 0/1")
    if np.any((pi <= 0) | (pi >= 1)):
        raise DataError("pi_hat must lie strictly inside (0, 1); clip it first")
    if weights is None:
        w = np.full(n, 1.0 / n)
        weighted = False
    else:
        w = np.asarray(getattr(weights, "weights", weights), dtype=float).reshape(-1)
        if w.shape[0] != n:
            raise DataError(f"weights have length {w.shape[0]}, expected {n}")
        if np.any(w < 0):
            raise DataError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise DataError(f"weights must sum to 1, got {w.sum():.12g}")
        weighted = True
    m = np.asarray(m_hat, dtype=float)
    if m.ndim == 0:
        m = np.full(n, float(m))
    if m.ndim == 1:
        if m.shape[0] != n:
            raise DataError(f"m_hat has length {m.shape[0]}, expected {n}")
        m0 = m1 = m
    elif m.shape == (2, n):
        m0, m1 = m
    else:
        raise DataError(f"m_hat must have shape ({n},) or (2, {n}), got {m.shape}")
    return X, a, y, w, weighted, pi, m0, m1


def caipw_value(rule: LinearITR, X, a, y, weights, pi_hat, m_hat) -> ValueEstimate:
    """CAIPW value of ``rule`` over source units.

    Parameters
    ----------
    rule : LinearITR
    X : array-like of shape (n, p) or Dataset
        Source covariates. A :class:`Dataset` supplies ``X``, ``a`` and ``y``
        from its source rows, in which case pass ``a=y=None``.
    a, y : array-like of shape (n,)
        Treatment (0/1) and outcome.
    weights : array-like of shape (n,), CalibrationWeights or None
        Normalized calibration weights; ``None`` means uniform ``1/n``.
    pi_hat : array-like of shape (n,)
        Clipped propensity scores.
    m_hat : array-like of shape (n,) or (2, n)
        Outcome predictions: one pooled vector, or ``(control, treated)``
        rows in which case each unit uses the arm the rule assigns.
    """
    if isinstance(X, Dataset):
        X, a, y = X.estimation_arrays()
    X, a, y, w, weighted, pi, m0, m1 = _check_inputs(X, a, y, weights, pi_hat, m_hat)
    d = apply_itr(rule, X)
    m = np.where(d == 1, m1, m0)
    term = (a * d / pi + (1 - a) * (1 - d) / (1 - pi)) * (y - m) + m
    value = float(np.sum(w * term))
    return ValueEstimate(value=value, rule=rule, weighted=weighted, n_source_used=int(X.shape[0]))


class CAIPWObjective:
    """Precomputed CAIPW value as a function of rule coefficients.

    The value is affine in the assignment vector:
    ``V(d) = Σ w ψ₀ + d · w (ψ₁ - ψ₀)`` with per-unit pseudo-outcomes
    ``ψ₁ = m₁ + A (Y - m₁) / π`` and ``ψ₀ = m₀ + (1 - A)(Y - m₀) / (1 - π)``,
    so many rules can be scored with a single matrix product.

    Covariates are standardized with ``center``/``scale`` (source mean and
    sd by default); coefficients passed to :meth:`__call__` and
    :meth:`batch` act on the standardized covariates.
    """

    def __init__(self, X, a, y, weights, pi_hat, m_hat, center=None, scale=None):
        X, a, y, w, weighted, pi, m0, m1 = _check_inputs(X, a, y, weights, pi_hat, m_hat)
        self.weighted = weighted
        self.n = X.shape[0]
        self.center = X.mean(axis=0) if center is None else np.asarray(center, dtype=float)
        if scale is None:
            scale = X.std(axis=0)
        scale = np.asarray(scale, dtype=float)
        self.scale = np.where(scale > 0, scale, 1.0)
        self.Z = (X - self.center) / self.scale
        self._Zt = np.ascontiguousarray(self.Z.T)
        self._zmax = float(np.abs(self.Z).max()) if self.Z.size else 0.0
        psi1 = m1 + a * (y - m1) / pi
        psi0 = m0 + (1 - a) * (y - m0) / (1 - pi)
        self.base = float(np.sum(w * psi0))
        self.gain = w * (psi1 - psi0)

    @property
    def p(self):
        return self.Z.shape[1]

    def batch(self, etas):
        """Values for each row of ``etas`` (shape ``(k, p + 1)``)."""
        etas = np.atleast_2d(np.asarray(etas, dtype=float))
        beta = np.ascontiguousarray(etas[:, :-1])
        b = etas[:, -1:]
        scores = beta @ self._Zt
        scores += b
        # one rounding bound per candidate, valid for every unit
        bound = np.abs(beta).sum(axis=1, keepdims=True) * self._zmax + np.abs(b)
        treat = decide(scores, bound, self.p + 2)
        # row-wise sums keep each candidate's value independent of the batch it is in
        np.multiply(treat, self.gain, out=scores)
        return self.base + scores.sum(axis=1)

    def __call__(self, eta):
        return float(self.batch(eta)[0])
