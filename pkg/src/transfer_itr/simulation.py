"""Two-covariate simulation study with known treatment effects.

A general population with uniform height and age is generated together
with both potential outcomes. A target sample is drawn uniformly at random;
a source "trial" sample is drawn from the remainder with inclusion
probabilities that favour tall, older people, and is randomized 50/50.
Treatment benefits exactly the people taller than 55 inches and younger
than 41 years.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import SOURCE, TARGET, Dataset, write_dataset
from .exceptions import ConfigError, DataError
from .itr import LinearITR, apply_itr, unstandardize_eta

COVARIATES = ("height", "age")


@dataclass(frozen=True)
class SimConfig:
    n_general: int = 50_000
    n_target: int = 10_000
    height_range: tuple = (48.0, 84.0)
    age_range: tuple = (18.0, 65.0)
    # (intercept, height, age) on covariates standardized by the uniform moments
    propensity_coef: tuple = (0.0, 0.3, -0.3)
    sampling_coef: tuple = (-3.0, 0.5, 0.5)
    # Y*(0) = intercept + height coef * height + age coef * age + N(0, noise_sd^2)
    control_coef: tuple = (0.0, 0.02, 0.01)
    noise_sd: float = 1.0
    delta: float = 2.0
    height_cut: float = 55.0
    age_cut: float = 41.0
    source_treated_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("height_range", "age_range", "propensity_coef", "sampling_coef", "control_coef"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (self.height_range[1] > self.height_range[0] and self.age_range[1] > self.age_range[0]):
            raise ConfigError("covariate ranges must be nonempty")
        if self.n_general <= 0 or self.n_target <= 0:
            raise ConfigError("counts must be positive")
        if self.n_target >= self.n_general:
            raise ConfigError("n_target must be smaller than n_general")
        if not self.height_range[0] < self.height_cut < self.height_range[1]:
            raise ConfigError("height_cut must lie inside height_range")
        if not self.age_range[0] < self.age_cut < self.age_range[1]:
            raise ConfigError("age_cut must lie inside age_range")
        if self.noise_sd < 0 or self.delta <= 0:
            raise ConfigError("noise_sd must be >= 0 and delta > 0")
        if not 0 < self.source_treated_fraction < 1:
            raise ConfigError("source_treated_fraction must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown simulation config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def height_norm(self):
        return self.height_range[1] - self.height_cut

    @property
    def age_norm(self):
        return self.age_cut - self.age_range[0]

    def uniform_moments(self):
        """Mean and sd of (height, age) under the uniform design."""
        lo = np.array([self.height_range[0], self.age_range[0]])
        hi = np.array([self.height_range[1], self.age_range[1]])
        return (lo + hi) / 2, (hi - lo) / np.sqrt(12.0)

    def standardize(self, X):
        mean, sd = self.uniform_moments()
        return (np.asarray(X, dtype=float) - mean) / sd


def contrast(X, config: SimConfig):
    """Individual treatment effect ``δ · min((h - 55)/29, (41 - a)/23)``."""
    X = np.asarray(X, dtype=float)
    h_margin = (X[:, 0] - config.height_cut) / config.height_norm
    a_margin = (config.age_cut - X[:, 1]) / config.age_norm
    return config.delta * np.minimum(h_margin, a_margin)


def control_mean(X, config: SimConfig):
    b0, bh, ba = config.control_coef
    X = np.asarray(X, dtype=float)
    return b0 + bh * X[:, 0] + ba * X[:, 1]


def _logistic(coef, Z):
    return expit(coef[0] + Z @ np.asarray(coef[1:]))


@dataclass(frozen=True, eq=False)
class SimulatedPopulation:
    """A dataset plus per-row ground truth.

    ``dataset`` rows carry observed treatment and outcome where assigned
    (``NaN`` otherwise); truth arrays align with those rows.
    """

    dataset: Dataset
    y0: np.ndarray
    y1: np.ndarray
    propensity: np.ndarray
    sampling_score: np.ndarray
    index: np.ndarray = field(default=None)

    @property
    def X(self):
        return self.dataset.X

    @property
    def ids(self):
        return self.dataset.ids

    @property
    def true_optimal(self):
        return (self.y1 > self.y0).astype(int)

    @property
    def effect(self):
        return self.y1 - self.y0

    def __len__(self):
        return self.dataset.n

    def subset(self, mask):
        mask = np.asarray(mask)
        return SimulatedPopulation(
            dataset=self.dataset.subset(mask),
            y0=self.y0[mask],
            y1=self.y1[mask],
            propensity=self.propensity[mask],
            sampling_score=self.sampling_score[mask],
            index=self.index[mask],
        )

    def with_assignment(self, treatment, population):
        """Copy whose dataset has ``treatment`` assigned and outcome set to ``Y*(treatment)``."""
        t = np.asarray(treatment, dtype=float)
        y = np.where(t == 1, self.y1, self.y0)
        ds = Dataset(
            X=self.dataset.X,
            covariate_names=self.dataset.covariate_names,
            treatment=t,
            outcome=y,
            population=[population] * self.dataset.n,
            ids=self.dataset.ids,
        )
        return SimulatedPopulation(ds, self.y0, self.y1, self.propensity, self.sampling_score, self.index)


def _streams(config: SimConfig):
    gen, tgt, src = np.random.SeedSequence(config.seed).spawn(3)
    return np.random.default_rng(gen), np.random.default_rng(tgt), np.random.default_rng(src)


def generate_population(config: SimConfig, rng=None) -> SimulatedPopulation:
    """General population of ``n_general`` people with both potential outcomes."""
    if rng is None:
        rng = _streams(config)[0]
    n = config.n_general
    height = rng.uniform(*config.height_range, size=n)
    age = rng.uniform(*config.age_range, size=n)
    X = np.column_stack([height, age])
    eps = rng.normal(0.0, config.noise_sd, size=n)
    y0 = control_mean(X, config) + eps
    y1 = y0 + contrast(X, config)
    Z = config.standardize(X)
    ds = Dataset(
        X=X,
        covariate_names=COVARIATES,
        treatment=np.full(n, np.nan),
        outcome=np.full(n, np.nan),
        population=[TARGET] * n,
        ids=np.arange(n).astype(str),
        has_treatment_column=False,
        has_outcome_column=False,
        has_population_column=False,
    )
    return SimulatedPopulation(
        dataset=ds,
        y0=y0,
        y1=y1,
        propensity=_logistic(config.propensity_coef, Z),
        sampling_score=_logistic(config.sampling_coef, Z),
        index=np.arange(n),
    )


def sample_target(pop: SimulatedPopulation, config: SimConfig, rng=None) -> SimulatedPopulation:
    """Simple random sample of ``n_target`` rows; treatment ~ Bernoulli(true propensity)."""
    if rng is None:
        rng = _streams(config)[1]
    if config.n_target > len(pop):
        raise ConfigError("n_target exceeds the population size")
    rows = np.sort(rng.choice(len(pop), size=config.n_target, replace=False))
    sub = pop.subset(rows)
    a = (rng.random(len(sub)) < sub.propensity).astype(float)
    return sub.with_assignment(a, TARGET)


def sample_source_rct(remainder: SimulatedPopulation, config: SimConfig, rng=None) -> SimulatedPopulation:
    """Biased trial sample: inclusion ~ Bernoulli(sampling score), then 50/50 randomization."""
    if rng is None:
        rng = _streams(config)[2]
    if len(remainder) == 0:
        raise DataError("no units left to sample the source population from")
    include = rng.random(len(remainder)) < remainder.sampling_score
    if not include.any():
        raise DataError("source sampling selected zero units; raise the sampling intercept")
    sub = remainder.subset(include)
    a = (rng.random(len(sub)) < config.source_treated_fraction).astype(float)
    if a.min() == a.max():
        raise DataError("source sample has a single treatment arm")
    return sub.with_assignment(a, SOURCE)


@dataclass(frozen=True)
class Simulation:
    config: SimConfig
    general: SimulatedPopulation
    target: SimulatedPopulation
    source: SimulatedPopulation


def simulate(config: SimConfig = None) -> Simulation:
    """Generate the general population and draw the target and source samples."""
    config = config or SimConfig()
    g_rng, t_rng, s_rng = _streams(config)
    general = generate_population(config, g_rng)
    target = sample_target(general, config, t_rng)
    remainder = np.ones(len(general), dtype=bool)
    remainder[target.index] = False
    source = sample_source_rct(general.subset(remainder), config, s_rng)
    return Simulation(config=config, general=general, target=target, source=source)


def separable_population(eta, config: SimConfig = None, n=None) -> SimulatedPopulation:
    """Noiseless population whose treatment effect is the linear score ``eta · [x, 1]``.

    Covariates follow the uniform design of ``config``; the outcome noise is
    zero, so ``LinearITR(eta)`` classifies every unit correctly. Source-style
    treatment is assigned 50/50 with the ``config`` source stream.
    """
    config = config or SimConfig()
    g_rng, _, s_rng = _streams(config)
    n = config.n_general if n is None else n
    X = np.column_stack([
        g_rng.uniform(*config.height_range, size=n),
        g_rng.uniform(*config.age_range, size=n),
    ])
    eta = np.asarray(eta, dtype=float)
    y0 = control_mean(X, config)
    y1 = y0 + X @ eta[:-1] + eta[-1]
    ds = Dataset.from_arrays(X, covariate_names=COVARIATES)
    pop = SimulatedPopulation(
        dataset=ds,
        y0=y0,
        y1=y1,
        propensity=np.full(n, 0.5),
        sampling_score=np.ones(n),
        index=np.arange(n),
    )
    a = (s_rng.random(n) < 0.5).astype(float)
    return pop.with_assignment(a, SOURCE)


def oracle_classification_rate(rule: LinearITR, pop: SimulatedPopulation) -> float:
    """Share of units whose recommended treatment is the one that is truly better for them."""
    if pop.y0 is None or pop.y1 is None:
        raise DataError("population lacks ground-truth potential outcomes")
    return float(np.mean(apply_itr(rule, pop.X) == pop.true_optimal))


def _best_offsets(S, truth):
    """For each projection column of ``S``, the threshold maximizing agreement with ``truth``.

    A unit is treated when its projection exceeds the threshold. Returns
    ``(correct_counts, thresholds)``.
    """
    n, k = S.shape
    order = np.argsort(-S, axis=0, kind="stable")
    s_sorted = np.take_along_axis(S, order, axis=0)
    t_sorted = truth[order]
    pos_total = truth.sum()
    # treating the top j units: correct = positives among them + negatives among the rest
    cum_pos = np.vstack([np.zeros((1, k)), np.cumsum(t_sorted, axis=0)])
    j = np.arange(n + 1)[:, None]
    correct = cum_pos + (n - pos_total) - (j - cum_pos)
    # a cut between j-1 and j is only realizable where projections differ by
    # more than rounding; exact ties at critical angles are left to the
    # neighbouring midpoint angles, which order the pair either way
    valid = np.ones((n + 1, k), dtype=bool)
    gap_tol = 1e-9 * (1.0 + np.abs(s_sorted[:-1]))
    valid[1:n] = s_sorted[:-1] - s_sorted[1:] > gap_tol
    correct = np.where(valid, correct, -1)
    jbest = np.argmax(correct, axis=0)
    cols = np.arange(k)
    upper = np.where(jbest > 0, s_sorted[np.maximum(jbest - 1, 0), cols], s_sorted[0, cols] + 1.0)
    lower = np.where(jbest < n, s_sorted[np.minimum(jbest, n - 1), cols], s_sorted[-1, cols] - 1.0)
    return correct[jbest, cols], (upper + lower) / 2


def _critical_angles(Z):
    i, j = np.triu_indices(Z.shape[0], k=1)
    diff = Z[j] - Z[i]
    keep = np.any(diff != 0, axis=1)
    diff = diff[keep]
    # directions u with (z_j - z_i) · u = 0
    base = np.arctan2(diff[:, 0], -diff[:, 1]) % np.pi
    crit = np.unique(np.concatenate([base, base + np.pi]))
    nxt = np.append(crit[1:], crit[0] + 2 * np.pi)
    return np.concatenate([crit, (crit + nxt) / 2])


@dataclass(frozen=True)
class OptimalRule:
    rule: LinearITR
    rate: float
    grid_best_rate: float


def true_optimal_linear_itr(pop: SimulatedPopulation, n_angles=1440, refine_rounds=3,
                            chunk=256) -> OptimalRule:
    """Linear rule with the highest oracle classification rate on ``pop``.

    For each direction the best offset is found exactly by sorting
    projections, so the search is exhaustive over offsets. Directions are a
    dense angular grid refined locally; for small samples (at most 200
    units) every combinatorially distinct direction is enumerated instead.
    """
    X = np.asarray(pop.X, dtype=float)
    if X.shape[1] != 2:
        raise DataError("the exhaustive oracle is only defined for two covariates")
    truth = pop.true_optimal.astype(float)
    n = X.shape[0]
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mean) / sd

    def search(angles):
        best = (-1.0, None, None)
        for start in range(0, len(angles), chunk):
            th = angles[start:start + chunk]
            U = np.vstack([np.cos(th), np.sin(th)])
            counts, thr = _best_offsets(Z @ U, truth)
            j = int(np.argmax(counts))
            if counts[j] > best[0]:
                best = (float(counts[j]), float(th[j]), float(thr[j]))
        return best

    if n <= 200:
        count, theta, thr = search(_critical_angles(Z))
        grid_count = count
    else:
        step = 2 * np.pi / n_angles
        count, theta, thr = search(np.arange(n_angles) * step)
        grid_count = count
        for _ in range(refine_rounds):
            local = theta + np.linspace(-step, step, 129)
            c2, t2, thr2 = search(local)
            if c2 > count:
                count, theta, thr = c2, t2, thr2
            step /= 32
    eta_std = np.array([np.cos(theta), np.sin(theta), -thr])
    rule = LinearITR(unstandardize_eta(eta_std, mean, sd), COVARIATES)
    rate = oracle_classification_rate(rule, pop)
    return OptimalRule(rule=rule, rate=rate, grid_best_rate=grid_count / n)


def true_ate(config: SimConfig):
    """Population ATE ``E[c(X)]`` under the uniform design.

    The age integral of ``min(u, v(age))`` is done in closed form for each
    height; the remaining one-dimensional integral is piecewise smooth and
    handled by adaptive quadrature split at its breakpoints.
    """
    from scipy.integrate import quad

    a_lo, a_hi = config.age_range
    h_lo, h_hi = config.height_range

    def v_integral(a0, a1):
        # ∫ (age_cut - a) / age_norm da over [a0, a1]
        return ((config.age_cut - a0) ** 2 - (config.age_cut - a1) ** 2) / (2 * config.age_norm)

    def inner(h):
        u = (h - config.height_cut) / config.height_norm
        # min is u below the crossing age, the age margin above it
        cross = min(max(config.age_cut - config.age_norm * u, a_lo), a_hi)
        return u * (cross - a_lo) + v_integral(cross, a_hi)

    # heights where the crossing age reaches either end of the age range
    breaks = [
        config.height_cut + config.height_norm * (config.age_cut - a) / config.age_norm
        for a in (a_lo, a_hi)
    ]
    breaks = [b for b in breaks if h_lo < b < h_hi]
    total, _ = quad(inner, h_lo, h_hi, points=breaks or None, epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(config.delta * total / ((h_hi - h_lo) * (a_hi - a_lo)))


def write_simulation(sim: Simulation, outdir) -> dict:
    """Write general/source/target/truth CSV files and ``sim_meta.json``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "general": outdir / "general.csv",
        "source": outdir / "source.csv",
        "target": outdir / "target.csv",
        "truth": outdir / "truth.csv",
        "meta": outdir / "sim_meta.json",
    }
    write_dataset(sim.general.dataset, paths["general"])
    write_dataset(sim.source.dataset, paths["source"])
    tgt = sim.target.dataset
    # target treatment/outcome exist only for oracles; learners see covariates only
    write_dataset(
        Dataset(
            X=tgt.X, covariate_names=tgt.covariate_names, treatment=np.full(tgt.n, np.nan),
            outcome=np.full(tgt.n, np.nan), population=tgt.population, ids=tgt.ids,
            has_treatment_column=False, has_outcome_column=False,
        ),
        paths["target"],
    )
    g = sim.general
    with paths["truth"].open("w", encoding="utf-8") as fh:
        fh.write("id,y0,y1,true_propensity,true_optimal\n")
        for i in range(len(g)):
            fh.write(
                f"{g.ids[i]},{float(g.y0[i])!r},{float(g.y1[i])!r},"
                f"{float(g.propensity[i])!r},{int(g.y1[i] > g.y0[i])}\n"
            )
    meta = {
        "config": sim.config.to_dict(),
        "n_general": len(sim.general),
        "n_target": len(sim.target),
        "n_source": len(sim.source),
        "target_ids_file": "target.csv",
    }
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


# Typical intensive-care means and standard deviations, (source, target) means where shifted.
APPLICATION_COVARIATES = (
    # name, source mean, target mean, sd
    ("ReAdmission", 0.3277, 0.0475, None),
    ("Age", 66.0, 63.0, 16.0),
    ("Weight", 80.0, 84.0, 24.0),
    ("BodyTemperature", 36.9, 36.7, 0.9),
    ("MeanBloodPressure", 78.0, 84.0, 15.0),
    ("RespiratoryRate", 20.0, 22.0, 6.0),
    ("Sodium", 138.5, 138.0, 5.5),
    ("Glucose", 145.0, 160.0, 70.0),
    ("BloodUreaNitrogen", 32.0, 34.0, 25.0),
    ("Creatinine", 1.7, 1.8, 1.5),
    ("Bilirubin", 1.9, 1.6, 3.0),
    ("Albumin", 2.9, 3.0, 0.65),
    ("WBCCount", 13.0, 13.5, 9.0),
)


def generate_application_like(n_source=4000, n_target=4000, seed=0):
    """Synthetic source/target pair with thirteen clinical covariates.

    Thirteen covariates (one binary re-admission flag), binary treatment
    assigned by a covariate-dependent propensity in the source, and a
    binary survival outcome whose treatment effect varies with glucose and
    blood urea nitrogen. The target sample has covariates only.
    """
    rng = np.random.default_rng(seed)
    names = [c[0] for c in APPLICATION_COVARIATES]

    def draw(n, which):
        cols = []
        for name, m_src, m_tgt, sd in APPLICATION_COVARIATES:
            m = m_src if which == SOURCE else m_tgt
            if sd is None:
                cols.append((rng.random(n) < m).astype(float))
            else:
                cols.append(np.maximum(rng.normal(m, sd, n), 0.05 * abs(m)))
        return np.column_stack(cols)

    Xs = draw(n_source, SOURCE)
    Xt = draw(n_target, TARGET)
    mu = np.array([c[1] for c in APPLICATION_COVARIATES])
    sd = np.array([c[3] if c[3] is not None else 0.47 for c in APPLICATION_COVARIATES])
    Zs = (Xs - mu) / sd
    j = {n: k for k, n in enumerate(names)}
    prop = expit(-0.2 + 0.5 * Zs[:, j["RespiratoryRate"]] - 0.3 * Zs[:, j["MeanBloodPressure"]])
    a = (rng.random(n_source) < prop).astype(float)
    base = 1.2 - 0.5 * Zs[:, j["Age"]] - 0.4 * Zs[:, j["BloodUreaNitrogen"]] + 0.3 * Zs[:, j["Albumin"]]
    effect = -0.6 * Zs[:, j["Glucose"]] + 0.5 * Zs[:, j["BloodUreaNitrogen"]] + 0.1
    surv = (rng.random(n_source) < expit(base + a * effect)).astype(float)
    source = Dataset(
        X=Xs, covariate_names=names, treatment=a, outcome=surv,
        population=[SOURCE] * n_source, ids=[f"s{i}" for i in range(n_source)],
    )
    target = Dataset(
        X=Xt, covariate_names=names, treatment=np.full(n_target, np.nan),
        outcome=np.full(n_target, np.nan), population=[TARGET] * n_target,
        ids=[f"t{i}" for i in range(n_target)],
        has_treatment_column=False, has_outcome_column=False,
    )
    return source, target
