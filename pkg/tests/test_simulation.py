import filecmp
import itertools
import json

import numpy as np
import pytest
from scipy.integrate import dblquad

from transfer_itr.exceptions import ConfigError, DataError
from transfer_itr.itr import LinearITR
from transfer_itr.simulation import (
    SimConfig,
    contrast,
    generate_application_like,
    generate_population,
    oracle_classification_rate,
    separable_population,
    simulate,
    true_ate,
    true_optimal_linear_itr,
    write_simulation,
)


@pytest.fixture(scope="module")
def sim():
    return simulate(SimConfig(seed=0))


def test_positive_effect_region(sim):
    g = sim.general
    h, a = g.X[:, 0], g.X[:, 1]
    region = (h > 55) & (a < 41)
    np.testing.assert_array_equal(g.true_optimal.astype(bool), region)
    assert np.all(g.effect[region] > 0)
    assert 0.3 < region.mean() < 0.5


def test_contrast_boundary():
    cfg = SimConfig()
    assert contrast(np.array([[55.0, 30.0]]), cfg)[0] == 0.0
    assert contrast(np.array([[70.0, 41.0]]), cfg)[0] == 0.0
    assert contrast(np.array([[84.0, 18.0]]), cfg)[0] == pytest.approx(2.0)


def test_control_mean_matches_closed_form(sim):
    y0 = sim.general.y0
    # 0.02 * E[height] + 0.01 * E[age] under the uniform design
    analytic = 0.02 * 66.0 + 0.01 * 41.5
    assert analytic == pytest.approx(1.735)
    var = 0.02**2 * 36**2 / 12 + 0.01**2 * 47**2 / 12 + 1.0
    se = np.sqrt(var / len(y0))
    assert abs(y0.mean() - analytic) < 3 * se


def test_consistency_identity(sim):
    for part in (sim.target, sim.source):
        ds = part.dataset
        np.testing.assert_array_equal(ds.outcome, np.where(ds.treatment == 1, part.y1, part.y0))


def test_target_sample(sim):
    t = sim.target
    assert len(t) == 10_000
    assert len(set(t.ids)) == len(t)
    p = t.propensity.mean()
    se = np.sqrt(p * (1 - p) / len(t))
    assert abs(t.dataset.treatment.mean() - p) < 3 * se


def test_source_sample(sim):
    s = sim.source
    assert 2000 <= len(s) <= 4000
    assert not set(s.ids) & set(sim.target.ids)
    se = np.sqrt(0.25 / len(s))
    assert abs(s.dataset.treatment.mean() - 0.5) < 3 * se


def test_source_is_taller_and_older_over_seeds():
    for seed in range(20):
        cfg = SimConfig(seed=seed)
        s = simulate(cfg)
        assert s.source.X[:, 0].mean() > s.general.X[:, 0].mean()
        assert s.source.X[:, 1].mean() > s.general.X[:, 1].mean()


def test_seeded_determinism_of_exports(tmp_path):
    cfg = SimConfig(n_general=3000, n_target=500, seed=4)
    write_simulation(simulate(cfg), tmp_path / "a")
    write_simulation(simulate(cfg), tmp_path / "b")
    names = ["general.csv", "source.csv", "target.csv", "truth.csv", "sim_meta.json"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert match == names, (mismatch, errors)
    meta = json.loads((tmp_path / "a" / "sim_meta.json").read_text())
    assert SimConfig.from_dict(meta["config"]) == cfg
    header = (tmp_path / "a" / "truth.csv").read_text().splitlines()[0]
    assert header == "id,y0,y1,true_propensity,true_optimal"


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(n_target=60_000)
    with pytest.raises(ConfigError):
        SimConfig(height_range=(80, 50))
    with pytest.raises(ConfigError, match="unknown"):
        SimConfig.from_dict({"n": 3})
    with pytest.raises(DataError):
        simulate(SimConfig(n_general=200, n_target=100, sampling_coef=(-60, 0, 0)))


def test_true_ate_matches_independent_quadrature():
    cfg = SimConfig()

    def f(a, h):
        return contrast(np.array([[h, a]]), cfg)[0]

    val, _ = dblquad(f, 48, 84, 18, 65, epsabs=1e-9)
    assert true_ate(cfg) == pytest.approx(val / (36 * 47), abs=1e-7)


def test_oracle_rate_examples(sim):
    t = sim.target
    rule = LinearITR([1.0, -0.5, 3.0], ["height", "age"])
    r = oracle_classification_rate(rule, t)
    assert oracle_classification_rate(rule.scaled(-1.0), t) == pytest.approx(1 - r)
    sep = separable_population([0.05, -0.08, 0.2], SimConfig(seed=1), n=2000)
    assert oracle_classification_rate(LinearITR([0.05, -0.08, 0.2], ["height", "age"]), sep) == 1.0


def test_true_optimal_on_separable_population():
    pop = separable_population([0.05, -0.08, 0.2], SimConfig(seed=2), n=5000)
    assert true_optimal_linear_itr(pop).rate == 1.0


def _brute_force_best_rate(X, truth):
    n = len(truth)
    best = max(truth.mean(), 1 - truth.mean())
    for i, j in itertools.combinations(range(n), 2):
        d = X[j] - X[i]
        normal = np.array([-d[1], d[0]])
        s = (X - X[i]) @ normal
        s[[i, j]] = 0.0
        for si, sj in itertools.product((-1, 1), repeat=2):
            s2 = s.copy()
            s2[i], s2[j] = si, sj
            for sign in (1, -1):
                best = max(best, np.mean(((sign * s2) > 0) == truth))
    return best


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_small_sample_oracle_is_exhaustive(seed):
    cfg = SimConfig(n_general=200, n_target=40, seed=seed, noise_sd=0.0)
    pop = generate_population(cfg).subset(np.arange(40))
    truth = pop.true_optimal
    res = true_optimal_linear_itr(pop)
    brute = _brute_force_best_rate(pop.X, truth)
    assert res.rate == pytest.approx(brute, abs=1e-12)


def test_oracle_rate_not_below_grid(sim):
    res = true_optimal_linear_itr(sim.target)
    assert res.rate >= res.grid_best_rate
    for theta in np.linspace(0, 2 * np.pi, 24, endpoint=False):
        for off in (-1.0, 0.0, 1.0):
            mean, sd = sim.target.X.mean(axis=0), sim.target.X.std(axis=0)
            beta = np.array([np.cos(theta), np.sin(theta)]) / sd
            rule = LinearITR(np.r_[beta, -off - beta @ mean], ["height", "age"])
            assert oracle_classification_rate(rule, sim.target) <= res.rate


@pytest.mark.slow
def test_true_optimal_rate_range_over_seeds():
    rates = [true_optimal_linear_itr(simulate(SimConfig(seed=s)).target).rate for s in range(20)]
    assert all(0.90 <= r <= 0.97 for r in rates), rates


def test_application_like_shape():
    src, tgt = generate_application_like(n_source=500, n_target=400, seed=1)
    assert src.p == tgt.p == 13
    assert set(np.unique(src.treatment)) == {0.0, 1.0}
    assert set(np.unique(src.outcome)) <= {0.0, 1.0}
    assert tgt.n_target == 400 and src.n_source == 500
    assert not tgt.has_outcome_column
    readmit = src.covariate_names.index("ReAdmission")
    assert src.X[:, readmit].mean() > tgt.X[:, readmit].mean()
