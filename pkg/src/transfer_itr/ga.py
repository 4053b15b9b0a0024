"""Real-coded genetic algorithm for maximizing a rule-value objective.

Rank-based tournament selection, blend (BLX-0.25) crossover, Gaussian
mutation and elitism, run from several independent random restarts. All
randomness derives from one master seed, and fitness evaluation never
touches the random streams, so results do not depend on how evaluations
are scheduled.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigError, ITRError
from .itr import LinearITR


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 200
    generations: int = 150
    domain: tuple = (-1.0, 1.0)
    tournament_size: int = 4
    crossover_rate: float = 0.9
    mutation_rate: Optional[float] = None  # None -> 1 / (p + 1)
    mutation_scale: Optional[float] = None  # None -> 0.1 * box width
    elitism: int = 2
    seed: int = 0
    restarts: int = 10

    def __post_init__(self):
        lo, hi = self.domain
        object.__setattr__(self, "domain", (float(lo), float(hi)))
        if not hi > lo:
            raise ConfigError(f"domain must have positive width, got {self.domain}")
        if self.population_size < 2 or self.population_size < self.tournament_size:
            raise ConfigError("population_size must be >= max(2, tournament_size)")
        if self.tournament_size < 1:
            raise ConfigError("tournament_size must be >= 1")
        if self.generations < 0 or self.restarts < 1:
            raise ConfigError("generations must be >= 0 and restarts >= 1")
        if not 0 <= self.elitism < self.population_size:
            raise ConfigError("elitism must lie in [0, population_size)")
        for name in ("crossover_rate", "mutation_rate"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.mutation_scale is not None and self.mutation_scale < 0:
            raise ConfigError("mutation_scale must be nonnegative")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GA config keys: {sorted(unknown)}")
        d = dict(d)
        if "domain" in d:
            d["domain"] = tuple(d["domain"])
        return cls(**d)

    def resolved(self, p):
        """Copy with the dimension-dependent defaults filled in for ``p`` covariates."""
        lo, hi = self.domain
        return GAConfig(
            **{
                **asdict(self),
                "mutation_rate": 1.0 / (p + 1) if self.mutation_rate is None else self.mutation_rate,
                "mutation_scale": 0.1 * (hi - lo) if self.mutation_scale is None else self.mutation_scale,
            }
        )

    def to_dict(self):
        d = asdict(self)
        d["domain"] = list(self.domain)
        return d


@dataclass
class GAResult:
    best_eta: np.ndarray
    best_value: float
    history: np.ndarray
    restart_best: list
    evaluations: int
    seed: int
    config: GAConfig = field(repr=False, default=None)

    def best_rule(self, covariate_names=None):
        """The best coefficients as a :class:`LinearITR` (in the objective's coordinates)."""
        if covariate_names is None:
            covariate_names = [f"x{j}" for j in range(self.best_eta.size - 1)]
        return LinearITR(self.best_eta, covariate_names)

    def to_dict(self):
        return {
            "best_eta": self.best_eta.tolist(),
            "best_value": self.best_value,
            "history": self.history.tolist(),
            "restart_best": [float(v) for v in self.restart_best],
            "evaluations": self.evaluations,
            "seed": self.seed,
            "config": self.config.to_dict() if self.config is not None else None,
        }


def n_threads():
    """Worker cap from ``ITR_THREADS`` (default 1)."""
    raw = os.environ.get("ITR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"ITR_THREADS must be an integer, got {raw!r}") from None


def evaluate_population(objective, population, threads=None):
    """Fitness of every candidate, in population order.

    Objectives exposing ``batch(etas)`` are evaluated in one vectorized
    call; plain callables are mapped over a thread pool of ``threads``
    workers (``ITR_THREADS`` by default).
    """
    if hasattr(objective, "batch"):
        fitness = np.asarray(objective.batch(population), dtype=float)
    else:
        threads = n_threads() if threads is None else threads
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                fitness = np.fromiter(pool.map(objective, population), float, len(population))
        else:
            fitness = np.fromiter((objective(eta) for eta in population), float, len(population))
    bad = ~np.isfinite(fitness)
    if np.any(bad):
        j = int(np.flatnonzero(bad)[0])
        raise ITRError(f"objective returned {fitness[j]} at eta={population[j].tolist()}")
    return fitness


def _ranks(fitness):
    # best candidate gets rank 0; ties broken by lower index
    order = np.argsort(-fitness, kind="stable")
    ranks = np.empty(len(fitness), dtype=int)
    ranks[order] = np.arange(len(fitness))
    return order, ranks


def tournament_select(ranks, n_select, tournament_size, rng):
    """Indices of tournament winners (sampling with replacement, lowest rank wins)."""
    entrants = rng.integers(0, len(ranks), size=(n_select, tournament_size))
    winners = np.argmin(ranks[entrants], axis=1)
    return entrants[np.arange(n_select), winners]


def evolve_generation(population, fitness, config: GAConfig, rng):
    """Produce the next population from ``population`` and its ``fitness``.

    The ``config.elitism`` best candidates are copied unchanged; the rest
    are children of tournament-selected parents, recombined by blend
    crossover with probability ``crossover_rate`` and then mutated gene-wise.
    ``config`` must be resolved (see :meth:`GAConfig.resolved`).
    """
    population = np.asarray(population, dtype=float)
    fitness = np.asarray(fitness, dtype=float)
    k, dim = population.shape
    if fitness.shape != (k,):
        raise ITRError("fitness must align with the population")
    if not np.all(np.isfinite(fitness)):
        raise ITRError("fitness values must be finite")
    if k < config.elitism:
        raise ITRError(f"population of {k} is smaller than elitism count {config.elitism}")
    lo, hi = config.domain
    order, ranks = _ranks(fitness)
    elites = population[order[: config.elitism]]

    n_children = k - config.elitism
    n_pairs = (n_children + 1) // 2
    parents = population[tournament_select(ranks, 2 * n_pairs, config.tournament_size, rng)]
    p1, p2 = parents[0::2], parents[1::2]

    cross = rng.random(n_pairs) < config.crossover_rate
    low = np.minimum(p1, p2)
    gap = np.abs(p1 - p2)
    u = rng.random((2, n_pairs, dim))
    blended = (low - 0.25 * gap) + u * (1.5 * gap)
    c1 = np.where(cross[:, None], blended[0], p1)
    c2 = np.where(cross[:, None], blended[1], p2)
    children = np.empty((2 * n_pairs, dim))
    children[0::2] = c1
    children[1::2] = c2
    children = children[:n_children]

    mutate = rng.random(children.shape) < config.mutation_rate
    noise = rng.normal(0.0, config.mutation_scale, size=children.shape)
    children = np.where(mutate, children + noise, children)
    children = np.clip(children, lo, hi)
    return np.vstack([elites, children])


def optimize_itr(objective: Callable, p: int, config: GAConfig = None) -> GAResult:
    """Maximize ``objective(eta)`` over ``eta`` in the configured box.

    Parameters
    ----------
    objective : callable
        Maps a coefficient vector of length ``p + 1`` to a finite real.
        May also expose ``batch(etas)`` for vectorized evaluation.
    p : int
        Number of covariates.
    config : GAConfig, optional

    Returns
    -------
    GAResult
        ``best_value`` is the maximum over every candidate evaluated in all
        restarts (ties go to the earliest evaluation). ``history`` holds the
        best-so-far value after each generation, restarts concatenated.
    """
    config = (config or GAConfig()).resolved(p)
    dim = p + 1
    lo, hi = config.domain
    streams = np.random.SeedSequence(config.seed).spawn(config.restarts)

    best_value = -np.inf
    best_eta = None
    history = []
    restart_best = []
    evaluations = 0
    for ss in streams:
        rng = np.random.default_rng(ss)
        pop = rng.uniform(lo, hi, size=(config.population_size, dim))
        r_best = -np.inf
        for gen in range(config.generations + 1):
            if gen > 0:
                pop = evolve_generation(pop, fitness, config, rng)
            fitness = evaluate_population(objective, pop)
            evaluations += len(pop)
            j = int(np.argmax(fitness))
            if fitness[j] > r_best:
                r_best = float(fitness[j])
            if fitness[j] > best_value:
                best_value = float(fitness[j])
                best_eta = pop[j].copy()
            history.append(best_value)
        restart_best.append(r_best)
    return GAResult(
        best_eta=best_eta,
        best_value=best_value,
        history=np.asarray(history),
        restart_best=restart_best,
        evaluations=evaluations,
        seed=config.seed,
        config=config,
    )
