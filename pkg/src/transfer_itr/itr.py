"""Linear individualized treatment rules.

A rule with coefficients ``eta`` (covariate weights followed by an
intercept) recommends treatment for ``x`` exactly when
``eta · [x, 1] > 0``; a zero score means control. Scores within the
floating-point rounding bound of zero count as zero, which makes the
assignment exactly invariant to positive rescaling of ``eta``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CovariateSummary
from .exceptions import DataError


@dataclass(frozen=True, eq=False)
class LinearITR:
    eta: np.ndarray
    covariate_names: tuple

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float).reshape(-1)
        names = tuple(str(c) for c in self.covariate_names)
        if eta.size != len(names) + 1:
            raise DataError(
                f"eta has {eta.size} entries; expected {len(names) + 1} "
                f"({len(names)} covariates plus intercept)"
            )
        if not np.all(np.isfinite(eta)):
            raise DataError("eta must be finite")
        if not np.any(eta != 0):
            raise DataError("eta must have at least one nonzero entry")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "covariate_names", names)

    @property
    def coefficients(self):
        return self.eta[:-1]

    @property
    def intercept(self):
        return float(self.eta[-1])

    @property
    def p(self):
        return len(self.covariate_names)

    def canonical(self):
        """Copy rescaled to unit max-norm; equal assignments for equal canonical forms."""
        return LinearITR(self.eta / np.max(np.abs(self.eta)), self.covariate_names)

    def scaled(self, c):
        return LinearITR(c * self.eta, self.covariate_names)

    def score(self, X):
        X = _check_X(X, self.p)
        return X @ self.eta[:-1] + self.eta[-1]

    def predict(self, X):
        return apply_itr(self, X)

    def to_dict(self):
        return {"covariate_names": list(self.covariate_names), "eta": self.eta.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(eta=d["eta"], covariate_names=d["covariate_names"])
        except KeyError as exc:
            raise DataError(f"rule JSON missing key {exc}") from None

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def inequality(self, digits=4, per_line=4):
        """Human-readable rule, e.g. ``0 < 0.5000·x1 - 1.2500·x2 + 0.1000``."""
        terms = []
        for j, (c, name) in enumerate(zip(self.coefficients, self.covariate_names)):
            mag = f"{abs(c):.{digits}f}·{name}"
            if j == 0:
                terms.append(mag if c >= 0 else f"-{mag}")
            else:
                terms.append(f"{'+' if c >= 0 else '-'} {mag}")
        b = self.intercept
        terms.append(f"{'+' if b >= 0 else '-'} {abs(b):.{digits}f}")
        lines = [" ".join(terms[i:i + per_line]) for i in range(0, len(terms), per_line)]
        return "0 < " + "\n    ".join(lines)


def decide(scores, magnitudes, n_terms):
    """Strict-positivity test robust to rounding in the score's dot product.

    ``magnitudes`` is ``|x| · |eta|`` for the same rows; a score is treated as
    positive only if it exceeds the worst-case accumulated rounding error.
    """
    return scores > magnitudes * (n_terms * _EPS)


_EPS = np.finfo(float).eps


def _check_X(X, p):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :] if p > 1 or X.size == 1 else X[:, None]
    if X.ndim != 2 or X.shape[1] != p:
        raise DataError(f"rule expects {p} covariates, got array of shape {X.shape}")
    return X


def apply_itr(rule: LinearITR, X, covariate_names: Sequence[str] = None):
    """Binary recommendations ``1{eta · [x, 1] > 0}`` for each row of ``X``.

    If ``covariate_names`` is given it must match the rule's order exactly.
    """
    if covariate_names is not None and tuple(covariate_names) != rule.covariate_names:
        raise DataError(
            f"covariate order {list(covariate_names)} does not match rule "
            f"{list(rule.covariate_names)}"
        )
    X = _check_X(X, rule.p)
    scores = X @ rule.eta[:-1] + rule.eta[-1]
    magnitudes = np.abs(X) @ np.abs(rule.eta[:-1]) + abs(rule.eta[-1])
    return decide(scores, magnitudes, rule.p + 2).astype(int)


def covariate_importance(rule: LinearITR, summary: CovariateSummary):
    """Rank covariates by ``|coefficient × sd|``; sign kept, intercept excluded.

    Ties (including the zero importance of constant covariates) keep the
    rule's covariate order.
    """
    sd_by_name = dict(zip(summary.names, summary.sd))
    missing = [n for n in rule.covariate_names if n not in sd_by_name]
    if missing:
        raise DataError(f"summary lacks covariates {missing}")
    adjusted = [
        (name, float(c * sd_by_name[name]))
        for name, c in zip(rule.covariate_names, rule.coefficients)
    ]
    order = sorted(range(len(adjusted)), key=lambda j: -abs(adjusted[j][1]))
    return [adjusted[j] for j in order]


def standardize_rule(rule: LinearITR, mean, sd) -> LinearITR:
    """Express a raw-covariate rule in standardized coordinates ``(x - mean) / sd``."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    beta = rule.coefficients * sd
    b0 = rule.intercept + float(rule.coefficients @ mean)
    return LinearITR(np.append(beta, b0), rule.covariate_names)


def unstandardize_eta(eta_std, mean, sd):
    """Map coefficients on ``(x - mean) / sd`` back to raw-covariate coefficients."""
    eta_std = np.asarray(eta_std, dtype=float)
    beta = eta_std[:-1] / sd
    b0 = eta_std[-1] - float(beta @ mean)
    return np.append(beta, b0)
