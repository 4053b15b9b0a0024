"""Entropy-balancing calibration weights.

Source units are reweighted so that their weighted covariate moments equal
those of the target population, while staying as close as possible (in
Kullback-Leibler divergence) to uniform weights. The problem is solved in
its dual, where weights take the exponential-tilting form
``w_i ∝ exp(-λ · g(x_i))``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TARGET, Dataset
from .exceptions import DataError, InfeasibleError, RankDeficientError
from .glm import dependent_columns


def moment_features(X, order=1):
    """Constraint functions ``g(x)``: the covariates, plus their squares when ``order == 2``."""
    X = np.asarray(X, dtype=float)
    if order == 1:
        return X
    if order == 2:
        return np.hstack([X, X**2])
    raise ValueError(f"moment order must be 1 or 2, got {order}")


def moment_names(names, order=1):
    names = list(names)
    if order == 2:
        return names + [f"{n}^2" for n in names]
    return names


@dataclass(frozen=True)
class MomentTargets:
    """Target-population moments the source sample is calibrated to.

    ``values`` follows :func:`moment_features` ordering. ``sd`` holds the
    target covariate standard deviations, used only for diagnostics.
    """

    names: tuple
    values: np.ndarray
    order: int = 1
    sd: Optional[np.ndarray] = None

    @classmethod
    def from_array(cls, X_target, order=1, names=None):
        X_target = np.asarray(X_target, dtype=float)
        if X_target.ndim == 1:
            X_target = X_target[:, None]
        if X_target.shape[0] == 0:
            raise DataError("target sample is empty")
        if names is None:
            names = [f"x{j}" for j in range(X_target.shape[1])]
        sd = X_target.std(axis=0, ddof=1) if X_target.shape[0] > 1 else np.zeros(X_target.shape[1])
        return cls(
            names=tuple(names),
            values=moment_features(X_target, order).mean(axis=0),
            order=order,
            sd=sd,
        )

    def to_dict(self):
        return {
            "order": self.order,
            "moments": dict(zip(moment_names(self.names, self.order), self.values.tolist())),
        }


def target_moments(ds: Dataset, order=1) -> MomentTargets:
    """Moments of the target rows of ``ds``."""
    tgt = ds.select(TARGET)
    if tgt.n == 0:
        raise DataError("dataset has no target rows")
    return MomentTargets.from_array(tgt.X, order=order, names=ds.covariate_names)


@dataclass(frozen=True)
class CalibrationWeights:
    weights: np.ndarray
    dual: np.ndarray
    converged: bool
    iterations: int
    residual: float

    @property
    def effective_sample_size(self):
        return float(1.0 / np.sum(self.weights**2))

    def to_dict(self):
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "max_abs_residual": self.residual,
            "effective_sample_size": self.effective_sample_size,
            "n": int(self.weights.size),
            "dual": self.dual.tolist(),
        }


def _dual_state(C, lam):
    v = -(C @ lam)
    shift = v.max()
    e = np.exp(v - shift)
    s = e.sum()
    w = e / s
    # dual objective: log mean exp(-C λ)
    f = shift + np.log(s) - np.log(C.shape[0])
    return w, f


def solve_entropy_balance(source_X, targets: MomentTargets, tol=1e-8, max_iter=100,
                          max_halvings=30, patience=5) -> CalibrationWeights:
    """Entropy-balancing weights matching ``targets`` on the source sample.

    Minimizes ``Σ w_i log(n w_i)`` subject to ``Σ w_i = 1`` and
    ``Σ w_i g(x_i) = targets``. Constraints are standardized by the source
    mean and standard deviation before solving; the weights do not depend
    on that reparameterization.

    Parameters
    ----------
    source_X : array-like of shape (n, p)
    targets : MomentTargets
    tol : float, default=1e-8
        Convergence threshold on the max-norm of the raw-scale moment residual.
    max_iter : int, default=100
        Newton iterations.
    max_halvings : int, default=30
        Backtracking step halvings per iteration.
    patience : int, default=5
        Consecutive non-improving iterations tolerated before declaring the
        targets infeasible.

    Raises
    ------
    RankDeficientError
        If constraint columns are constant or collinear.
    InfeasibleError
        If the targets lie outside the convex hull of the source moments.
    """
    X = np.asarray(source_X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    G = moment_features(X, targets.order)
    t = np.asarray(targets.values, dtype=float)
    n, k = G.shape
    if t.shape != (k,):
        raise DataError(f"{t.size} moment targets for {k} constraint columns")
    if n == 0:
        raise DataError("source sample is empty")
    names = moment_names(targets.names, targets.order)

    mu = G.mean(axis=0)
    sd = G.std(axis=0)
    const = sd == 0
    if np.any(const):
        raise RankDeficientError(
            f"constant constraint columns cannot be balanced: {[names[j] for j in np.flatnonzero(const)]}",
            [names[j] for j in np.flatnonzero(const)],
        )
    Z = (G - mu) / sd
    tz = (t - mu) / sd
    dependent = dependent_columns(np.hstack([Z, np.ones((n, 1))]), [*names, "intercept"])
    if dependent:
        raise RankDeficientError(f"collinear constraint columns: {dependent}", dependent)
    outside = (tz < Z.min(axis=0)) | (tz > Z.max(axis=0))
    if np.any(outside):
        bad = [names[j] for j in np.flatnonzero(outside)]
        raise InfeasibleError(
            f"target moments outside the range of the source sample for {bad}; "
            "no positive weights can match them (common support violated)"
        )

    C = Z - tz
    lam = np.zeros(k)
    w, f = _dual_state(C, lam)

    def raw_residual(w):
        return float(np.max(np.abs(w @ G - t)))

    res = raw_residual(w)
    best = res
    stale = 0
    it = 0
    while res >= tol and it < max_iter:
        it += 1
        r = w @ C
        H = (C * w[:, None]).T @ C - np.outer(r, r)
        try:
            step = scipy.linalg.solve(H, r, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, r, rcond=None)[0]
        # ∇f = -r, so the Newton direction is +H⁻¹r and the predicted decrease is r·step
        decrease = float(r @ step)
        s = 1.0
        for _ in range(max_halvings):
            w_new, f_new = _dual_state(C, lam + s * step)
            if f_new <= f - 1e-4 * s * decrease:
                break
            s *= 0.5
        else:
            w_new, f_new = _dual_state(C, lam + s * step)
        lam = lam + s * step
        w, f = w_new, f_new
        res = raw_residual(w)
        if res < best * (1 - 1e-3):
            best = res
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                raise InfeasibleError(
                    f"entropy balancing stalled after {it} iterations with residual {res:.3g}; "
                    "target moments are likely outside the source support",
                    residual=res,
                )
    if res >= tol:
        raise InfeasibleError(
            f"entropy balancing did not converge in {max_iter} iterations (residual {res:.3g})",
            residual=res,
        )
    return CalibrationWeights(weights=w, dual=lam, converged=True, iterations=it, residual=res)


@dataclass(frozen=True)
class BalanceReport:
    names: tuple
    source_mean: np.ndarray
    weighted_mean: np.ndarray
    target_mean: np.ndarray
    smd_before: np.ndarray
    smd_after: np.ndarray
    effective_sample_size: float

    def to_dict(self):
        return {
            "effective_sample_size": self.effective_sample_size,
            "covariates": [
                {
                    "name": name,
                    "source_mean": float(a),
                    "weighted_mean": float(b),
                    "target_mean": float(c),
                    "smd_before": float(d),
                    "smd_after": float(e),
                }
                for name, a, b, c, d, e in zip(
                    self.names, self.source_mean, self.weighted_mean, self.target_mean,
                    self.smd_before, self.smd_after,
                )
            ],
        }

    def to_rows(self):
        return self.to_dict()["covariates"]


def _smd(diff, scale):
    out = np.zeros_like(diff)
    nz = scale > 0
    out[nz] = diff[nz] / scale[nz]
    out[~nz & (diff != 0)] = np.inf
    return out


def balance_diagnostics(source_X, weights, targets: MomentTargets) -> BalanceReport:
    """First-moment balance before and after weighting.

    Standardized mean differences divide by ``sqrt((s_source² + s_target²) / 2)``;
    when the target sd is unknown the source sd is used alone.
    """
    X = np.asarray(source_X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.asarray(weights, dtype=float).reshape(-1)
    p = X.shape[1]
    if w.shape[0] != X.shape[0]:
        raise DataError(f"{w.shape[0]} weights for {X.shape[0]} source rows")
    tmean = np.asarray(targets.values[:p], dtype=float)
    s_src = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.zeros(p)
    if targets.sd is not None:
        scale = np.sqrt((s_src**2 + np.asarray(targets.sd) ** 2) / 2)
    else:
        scale = s_src
    smean = X.mean(axis=0)
    wmean = w @ X / w.sum()
    return BalanceReport(
        names=tuple(targets.names),
        source_mean=smean,
        weighted_mean=wmean,
        target_mean=tmean,
        smd_before=_smd(smean - tmean, scale),
        smd_after=_smd(wmean - tmean, scale),
        effective_sample_size=float(w.sum() ** 2 / np.sum(w**2)),
    )


def support_overlap(source_X, target_X, names: Optional[Sequence[str]] = None):
    """Per-covariate share of target units outside the source range.

    A crude, runnable check of the common-support requirement; any nonzero
    share means some target units have no comparable source units on that
    covariate.
    """
    S = np.asarray(source_X, dtype=float)
    T = np.asarray(target_X, dtype=float)
    lo, hi = S.min(axis=0), S.max(axis=0)
    out = (T < lo) | (T > hi)
    names = names or [f"x{j}" for j in range(S.shape[1])]
    return {
        "fraction_outside_by_covariate": dict(zip(names, out.mean(axis=0).tolist())),
        "fraction_outside_any": float(out.any(axis=1).mean()),
    }


def write_weights(path, ids, weights) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "weight"])
        for i, v in zip(ids, weights):
            w.writerow([i, repr(float(v))])


def read_weights(path):
    """Return ``(ids, weights)`` from an ``id,weight`` CSV file."""
    ids, ws = [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or {"id", "weight"} - set(reader.fieldnames):
            raise DataError(f"{path}: expected columns 'id' and 'weight'")
        for row in reader:
            ids.append(row["id"])
            ws.append(float(row["weight"]))
    return np.asarray(ids, dtype=object), np.asarray(ws)


class EntropyBalancer(BaseEstimator):
    """Scikit-learn style wrapper around :func:`solve_entropy_balance`.

    Parameters
    ----------
    order : {1, 2}, default=1
        Balance means only, or means and uncentered second moments.
    tol : float, default=1e-8
    max_iter : int, default=100

    Attributes
    ----------
    weights_ : ndarray of shape (n_source,)
        Positive weights summing to one.
    targets_ : MomentTargets
    result_ : CalibrationWeights

    Examples
    --------
    >>> import numpy as np
    >>> eb = EntropyBalancer().fit(np.array([[0.0], [1.0]]), np.array([[1.0], [1.0], [1.0], [0.0]]))
    >>> np.round(eb.weights_, 6).tolist()
    [0.25, 0.75]
    """

    def __init__(self, order=1, tol=1e-8, max_iter=100):
        self.order = order
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X_source, X_target, feature_names=None):
        X_source = check_array(X_source)
        X_target = check_array(X_target)
        if X_source.shape[1] != X_target.shape[1]:
            raise DataError("source and target have different numbers of covariates")
        self.targets_ = MomentTargets.from_array(X_target, order=self.order, names=feature_names)
        self.result_ = solve_entropy_balance(
            X_source, self.targets_, tol=self.tol, max_iter=self.max_iter
        )
        self.weights_ = self.result_.weights
        self.n_features_in_ = X_source.shape[1]
        return self

    def balance_report(self, X_source):
        check_is_fitted(self, "weights_")
        return balance_diagnostics(X_source, self.weights_, self.targets_)
