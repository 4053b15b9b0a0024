"""Patient data containers, CSV ingestion and summary statistics.

A :class:`Dataset` is stored column-wise (one covariate matrix plus
treatment/outcome/population vectors) and is immutable once built. Absent
treatment or outcome values are held as ``NaN``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import DataError, SchemaError

logger = logging.getLogger(__name__)

SOURCE = "source"
TARGET = "target"
POPULATIONS = (SOURCE, TARGET)

RESERVED_ROLES = ("id", "treatment", "outcome", "population")
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


@dataclass(frozen=True)
class Schema:
    """Column-role mapping for CSV ingestion.

    ``covariates=None`` means every column not claimed by another role is a
    covariate. ``default_population`` is used when the file has no
    population column.
    """

    id: Optional[str] = "id"
    covariates: Optional[tuple] = None
    treatment: Optional[str] = "treatment"
    outcome: Optional[str] = "outcome"
    population: Optional[str] = "population"
    default_population: str = SOURCE
    drop_incomplete: bool = False

    def __post_init__(self):
        if self.covariates is not None:
            object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.default_population.lower() not in POPULATIONS:
            raise SchemaError(
                f"default_population must be 'source' or 'target', got {self.default_population!r}"
            )
        object.__setattr__(self, "default_population", self.default_population.lower())

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "covariates" in d and d["covariates"] is not None:
            d["covariates"] = tuple(d["covariates"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {
            "id": self.id,
            "covariates": list(self.covariates) if self.covariates is not None else None,
            "treatment": self.treatment,
            "outcome": self.outcome,
            "population": self.population,
            "default_population": self.default_population,
            "drop_incomplete": self.drop_incomplete,
        }


@dataclass(frozen=True)
class PatientRecord:
    id: str
    covariates: np.ndarray
    treatment: Optional[int]
    outcome: Optional[float]
    population: str


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column-oriented patient table.

    Attributes
    ----------
    X : ndarray of shape (n, p)
        Covariates, no missing values.
    treatment : ndarray of shape (n,)
        0/1 as floats, ``NaN`` where absent.
    outcome : ndarray of shape (n,)
        Real outcomes, ``NaN`` where absent.
    population : ndarray of shape (n,)
        ``'source'`` or ``'target'`` per row.
    ids : ndarray of shape (n,)
        Opaque identifiers (strings).
    """

    X: np.ndarray
    covariate_names: tuple
    treatment: np.ndarray
    outcome: np.ndarray
    population: np.ndarray
    ids: np.ndarray
    has_treatment_column: bool = True
    has_outcome_column: bool = True
    has_population_column: bool = True

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError(f"X must be 2-dimensional, got shape {X.shape}")
        n, p = X.shape
        names = tuple(str(c) for c in self.covariate_names)
        if len(names) != p:
            raise DataError(f"{len(names)} covariate names for {p} columns")
        if len(set(names)) != p:
            dup = sorted({c for c in names if names.count(c) > 1})
            raise DataError(f"duplicate covariate names: {dup}")
        if not np.all(np.isfinite(X)):
            raise DataError("covariates contain missing or non-finite values")
        t = np.asarray(self.treatment, dtype=float).reshape(-1)
        y = np.asarray(self.outcome, dtype=float).reshape(-1)
        pop = np.asarray([str(s).lower() for s in self.population], dtype=object)
        ids = np.asarray([str(s) for s in self.ids], dtype=object)
        for name, arr in (("treatment", t), ("outcome", y), ("population", pop), ("ids", ids)):
            if arr.shape[0] != n:
                raise DataError(f"{name} has length {arr.shape[0]}, expected {n}")
        present = ~np.isnan(t)
        if np.any((t[present] != 0) & (t[present] != 1)):
            raise DataError("treatment values must be 0 or 1")
        bad = set(pop) - set(POPULATIONS)
        if bad:
            raise DataError(f"unknown population labels: {sorted(bad)}")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "treatment", _readonly(t))
        object.__setattr__(self, "outcome", _readonly(y))
        object.__setattr__(self, "population", _readonly(pop))
        object.__setattr__(self, "ids", _readonly(ids))

    @classmethod
    def from_arrays(cls, X, treatment=None, outcome=None, population=SOURCE,
                    covariate_names=None, ids=None):
        """Build a dataset from in-memory arrays."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n, p = X.shape
        if covariate_names is None:
            covariate_names = [f"x{j}" for j in range(p)]
        if isinstance(population, str):
            population = [population] * n
        return cls(
            X=X,
            covariate_names=tuple(covariate_names),
            treatment=np.full(n, np.nan) if treatment is None else treatment,
            outcome=np.full(n, np.nan) if outcome is None else outcome,
            population=population,
            ids=np.arange(n).astype(str) if ids is None else ids,
            has_treatment_column=treatment is not None,
            has_outcome_column=outcome is not None,
        )

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def n_source(self):
        return int(np.sum(self.population == SOURCE))

    @property
    def n_target(self):
        return int(np.sum(self.population == TARGET))

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> PatientRecord:
        t = self.treatment[i]
        y = self.outcome[i]
        return PatientRecord(
            id=self.ids[i],
            covariates=self.X[i],
            treatment=None if np.isnan(t) else int(t),
            outcome=None if np.isnan(y) else float(y),
            population=self.population[i],
        )

    def records(self) -> Iterator[PatientRecord]:
        for i in range(self.n):
            yield self[i]

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            X=self.X[mask],
            covariate_names=self.covariate_names,
            treatment=self.treatment[mask],
            outcome=self.outcome[mask],
            population=self.population[mask],
            ids=self.ids[mask],
            has_treatment_column=self.has_treatment_column,
            has_outcome_column=self.has_outcome_column,
            has_population_column=self.has_population_column,
        )

    def select(self, population=None) -> "Dataset":
        """Rows of one population (``None`` keeps everything)."""
        if population is None:
            return self
        population = population.lower()
        if population not in POPULATIONS:
            raise DataError(f"unknown population {population!r}")
        return self.subset(self.population == population)

    def source(self):
        return self.select(SOURCE)

    def target(self):
        return self.select(TARGET)

    def estimation_arrays(self):
        """Return ``(X, A, Y)`` for source rows, requiring treatment and outcome.

        Raises
        ------
        SchemaError
            If the dataset has no treatment or outcome column.
        DataError
            If any source row lacks a treatment or outcome value.
        """
        if not self.has_treatment_column:
            raise SchemaError("source data has no treatment column")
        if not self.has_outcome_column:
            raise SchemaError("source data has no outcome column")
        src = self.source()
        if src.n == 0:
            raise DataError("no source rows")
        missing_t = np.isnan(src.treatment)
        missing_y = np.isnan(src.outcome)
        if missing_t.any() or missing_y.any():
            raise DataError(
                f"{int(missing_t.sum())} source rows lack treatment and "
                f"{int(missing_y.sum())} lack outcome"
            )
        return np.asarray(src.X), src.treatment.astype(int), np.asarray(src.outcome)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.covariate_names != self.covariate_names:
            raise DataError(
                f"covariate names differ: {list(self.covariate_names)} vs {list(other.covariate_names)}"
            )
        return Dataset(
            X=np.vstack([self.X, other.X]),
            covariate_names=self.covariate_names,
            treatment=np.concatenate([self.treatment, other.treatment]),
            outcome=np.concatenate([self.outcome, other.outcome]),
            population=np.concatenate([self.population, other.population]),
            ids=np.concatenate([self.ids, other.ids]),
            has_treatment_column=self.has_treatment_column or other.has_treatment_column,
            has_outcome_column=self.has_outcome_column or other.has_outcome_column,
            has_population_column=True,
        )


def _parse_float(cell, row, column):
    if cell.strip().lower() in MISSING_TOKENS:
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: cannot parse {cell!r} as a number") from None


def load_dataset(path, schema: Optional[Schema] = None) -> Dataset:
    """Read a UTF-8 CSV file with a header row into a :class:`Dataset`.

    Rows are kept in file order. Row numbers in error messages are 1-based
    and count the header as row 1.
    """
    schema = schema or Schema()
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)

    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"{path}: duplicate column names {dup}")

    def role(name):
        return name if name is not None and name in header else None

    id_col = role(schema.id)
    t_col = role(schema.treatment)
    y_col = role(schema.outcome)
    pop_col = role(schema.population)
    if schema.covariates is not None:
        missing = [c for c in schema.covariates if c not in header]
        if missing:
            raise SchemaError(f"{path}: covariate columns not found: {missing}")
        cov_cols = list(schema.covariates)
    else:
        claimed = {id_col, t_col, y_col, pop_col}
        cov_cols = [h for h in header if h not in claimed]
    if not cov_cols:
        raise SchemaError(f"{path}: no covariate columns")
    idx = {h: j for j, h in enumerate(header)}

    X, T, Y, P, ids = [], [], [], [], []
    dropped = 0
    for r, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        x = [_parse_float(row[idx[c]], r, c) for c in cov_cols]
        if any(math.isnan(v) for v in x):
            if schema.drop_incomplete:
                dropped += 1
                continue
            bad = [c for c, v in zip(cov_cols, x) if math.isnan(v)]
            raise DataError(f"{path}: row {r} has missing covariates {bad}")
        if any(math.isinf(v) for v in x):
            raise DataError(f"{path}: row {r} has non-finite covariates")
        t = math.nan
        if t_col is not None:
            t = _parse_float(row[idx[t_col]], r, t_col)
            if not math.isnan(t) and t not in (0.0, 1.0):
                raise DataError(f"{path}: row {r}, column {t_col!r}: treatment must be 0 or 1, got {row[idx[t_col]]!r}")
        y = _parse_float(row[idx[y_col]], r, y_col) if y_col is not None else math.nan
        if pop_col is not None:
            pop = row[idx[pop_col]].strip().lower()
            if pop not in POPULATIONS:
                raise DataError(f"{path}: row {r}, column {pop_col!r}: expected 'source' or 'target', got {row[idx[pop_col]]!r}")
        else:
            pop = schema.default_population
        X.append(x)
        T.append(t)
        Y.append(y)
        P.append(pop)
        ids.append(row[idx[id_col]] if id_col is not None else str(r - 2))

    if dropped:
        logger.warning("%s: dropped %d rows with missing covariates", path, dropped)
    if not X:
        raise DataError(f"{path}: zero data rows")
    return Dataset(
        X=np.array(X, dtype=float),
        covariate_names=tuple(cov_cols),
        treatment=np.array(T),
        outcome=np.array(Y),
        population=P,
        ids=ids,
        has_treatment_column=t_col is not None,
        has_outcome_column=y_col is not None,
        has_population_column=pop_col is not None,
    )


def _fmt(v):
    if math.isnan(v):
        return ""
    return repr(float(v))


def write_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as CSV; floats are written with ``repr`` so they round-trip exactly."""
    header = ["id", *ds.covariate_names]
    if ds.has_treatment_column:
        header.append("treatment")
    if ds.has_outcome_column:
        header.append("outcome")
    header.append("population")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [ds.ids[i], *(_fmt(v) for v in ds.X[i])]
            if ds.has_treatment_column:
                t = ds.treatment[i]
                row.append("" if np.isnan(t) else str(int(t)))
            if ds.has_outcome_column:
                row.append(_fmt(ds.outcome[i]))
            row.append(ds.population[i])
            w.writerow(row)


@dataclass(frozen=True)
class CovariateSummary:
    names: tuple
    mean: np.ndarray
    sd: np.ndarray
    n: int

    def as_dict(self):
        return {
            name: {"mean": float(m), "sd": float(s)}
            for name, m, s in zip(self.names, self.mean, self.sd)
        }


def covariate_summary(ds: Dataset, population: Optional[str] = None) -> CovariateSummary:
    """Per-covariate mean and sample standard deviation (``ddof=1``)."""
    sel = ds.select(population)
    if sel.n == 0:
        raise DataError(f"no rows in population {population!r}")
    X = np.asarray(sel.X)
    sd = X.std(axis=0, ddof=1) if sel.n > 1 else np.zeros(sel.p)
    # exact zero for constant columns, independent of rounding in the mean
    sd = np.where(np.all(X == X[0], axis=0), 0.0, sd)
    return CovariateSummary(names=sel.covariate_names, mean=X.mean(axis=0), sd=sd, n=sel.n)


@dataclass
class ValidationReport:
    n_rows: int
    counts: dict
    constant_columns: list
    missing: dict
    issues: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.issues

    def to_dict(self):
        return {
            "n_rows": self.n_rows,
            "counts": self.counts,
            "constant_columns": self.constant_columns,
            "missing": self.missing,
            "issues": self.issues,
        }


def validate(ds: Dataset) -> ValidationReport:
    """Summarize data problems without modifying ``ds``."""
    counts = {}
    missing = {}
    issues = []
    for pop in POPULATIONS:
        sub = ds.select(pop)
        t = sub.treatment
        counts[pop] = {
            "n": sub.n,
            "treated": int(np.sum(t == 1)),
            "control": int(np.sum(t == 0)),
        }
        missing[pop] = {
            "treatment": int(np.sum(np.isnan(t))),
            "outcome": int(np.sum(np.isnan(sub.outcome))),
        }
    src = counts[SOURCE]
    if src["n"] == 0:
        issues.append("no source rows")
    else:
        if src["treated"] == 0:
            issues.append("empty treatment arm: no treated source units")
        if src["control"] == 0:
            issues.append("empty treatment arm: no control source units")
        if missing[SOURCE]["treatment"]:
            issues.append(f"{missing[SOURCE]['treatment']} source rows missing treatment")
        if missing[SOURCE]["outcome"]:
            issues.append(f"{missing[SOURCE]['outcome']} source rows missing outcome")

    constant = []
    if ds.n:
        const_mask = np.all(ds.X == ds.X[0], axis=0)
        constant = [name for name, c in zip(ds.covariate_names, const_mask) if c]
    for name in constant:
        issues.append(f"constant covariate column {name!r}")
    return ValidationReport(
        n_rows=ds.n, counts=counts, constant_columns=constant, missing=missing, issues=issues
    )
