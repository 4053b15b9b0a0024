import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import entropy_grid_oracle
from transfer_itr.calibration import (
    EntropyBalancer,
    MomentTargets,
    balance_diagnostics,
    read_weights,
    solve_entropy_balance,
    target_moments,
    write_weights,
)
from transfer_itr.data import Dataset
from transfer_itr.exceptions import DataError, InfeasibleError, RankDeficientError


def _targets(values, order=1, names=None):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    names = names or [f"x{j}" for j in range(len(values) // order)]
    return MomentTargets(names=tuple(names), values=values, order=order)


def test_target_moments_examples():
    ds = Dataset.from_arrays([[9.0], [0.0], [1.0], [1.0], [1.0]],
                             population=["source"] + ["target"] * 4)
    assert target_moments(ds).values[0] == 0.75
    ds2 = Dataset.from_arrays([[1.0], [2.0]], population="target")
    np.testing.assert_allclose(target_moments(ds2, order=2).values, [1.5, 2.5])
    with pytest.raises(DataError):
        target_moments(Dataset.from_arrays([[1.0]], population="source"))


def test_uniform_when_already_balanced(rng):
    X = rng.normal(size=(50, 3))
    cw = solve_entropy_balance(X, _targets(X.mean(axis=0)))
    np.testing.assert_allclose(cw.weights, 1 / 50, rtol=1e-12)
    assert cw.iterations == 0


def test_two_unit_forced_solution():
    cw = solve_entropy_balance([[0.0], [1.0]], _targets([0.75]))
    np.testing.assert_allclose(cw.weights, [0.25, 0.75], atol=1e-10)


@pytest.mark.parametrize(
    "X, target",
    [
        (np.array([[0.0], [1.0], [2.0]]), [1.3]),
        (np.array([[0.0], [1.0], [2.0], [3.5]]), [1.1]),
        (np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [0.5, 3.0]]), [1.0, 1.4]),
    ],
)
def test_matches_simplex_grid_oracle(X, target):
    cw = solve_entropy_balance(X, _targets(target))
    oracle = entropy_grid_oracle(X, np.asarray(target))
    np.testing.assert_allclose(cw.weights, oracle, atol=1e-4)


def test_constraints_and_positivity(rng):
    X = rng.normal(size=(400, 3))
    target = X.mean(axis=0) + [0.3, -0.2, 0.1]
    cw = solve_entropy_balance(X, _targets(target))
    assert np.all(cw.weights > 0)
    assert abs(cw.weights.sum() - 1) < 1e-12
    assert np.max(np.abs(cw.weights @ X - target)) < 1e-8
    assert cw.converged and cw.residual < 1e-8


def test_second_moments(rng):
    X = rng.normal(size=(500, 2))
    T = rng.normal(0.2, 0.9, size=(300, 2))
    mt = MomentTargets.from_array(T, order=2)
    cw = solve_entropy_balance(X, mt)
    np.testing.assert_allclose(cw.weights @ np.hstack([X, X**2]), mt.values, atol=1e-8)


def test_translation_invariance(rng):
    X = rng.normal(size=(200, 2))
    target = np.array([0.2, -0.1])
    w = solve_entropy_balance(X, _targets(target)).weights
    shift = np.array([100.0, -7.5])
    w2 = solve_entropy_balance(X + shift, _targets(target + shift)).weights
    np.testing.assert_allclose(w2, w, rtol=1e-8, atol=1e-14)


def test_affine_reparameterization_invariance(rng):
    X = rng.normal(size=(200, 2))
    target = np.array([0.2, -0.1])
    w = solve_entropy_balance(X, _targets(target)).weights
    scale = np.array([1e4, 1e-3])
    w2 = solve_entropy_balance(X * scale + 5, _targets(target * scale + 5)).weights
    np.testing.assert_allclose(w2, w, rtol=1e-8, atol=1e-14)


def test_infeasible_target():
    X = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(InfeasibleError):
        solve_entropy_balance(X, _targets([3.0]))


def test_infeasible_jointly_but_not_marginally():
    # each target lies in its marginal range, the pair is outside the hull
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5], [0.2, 0.25]])
    with pytest.raises(InfeasibleError) as info:
        solve_entropy_balance(X, _targets([0.9, 0.1]))
    assert info.value.residual > 0


def test_collinear_and_constant_columns(rng):
    X = rng.normal(size=(30, 2))
    with pytest.raises(RankDeficientError, match=r"\['a', 'b'\]"):
        solve_entropy_balance(np.c_[X, 2 * X[:, 0]], _targets([0, 0, 0], names=["a", "c", "b"]))
    with pytest.raises(RankDeficientError, match="constant"):
        solve_entropy_balance(np.c_[X, np.ones(30)], _targets([0, 0, 1]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 60))
def test_effective_sample_size_bound(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 1))
    t = float(np.quantile(X, rng.uniform(0.2, 0.8)))
    cw = solve_entropy_balance(X, _targets([t]))
    assert cw.effective_sample_size <= n * (1 + 1e-12)
    if not np.allclose(cw.weights, 1 / n):
        assert cw.effective_sample_size < n


def test_balance_diagnostics(rng):
    X = rng.normal(size=(300, 2))
    T = rng.normal(0.5, 1.0, size=(300, 2))
    mt = MomentTargets.from_array(T)
    cw = solve_entropy_balance(X, mt)
    rep = balance_diagnostics(X, cw.weights, mt)
    assert np.all(np.abs(rep.smd_after) < 0.01)
    assert np.all(np.abs(rep.smd_before) > 0.2)
    same = balance_diagnostics(X, np.full(300, 1 / 300), MomentTargets.from_array(X))
    np.testing.assert_allclose(same.smd_before, 0, atol=1e-12)
    np.testing.assert_allclose(same.smd_after, 0, atol=1e-12)


def test_weights_csv_round_trip(tmp_path, rng):
    w = rng.dirichlet(np.ones(10))
    ids = [f"p{i}" for i in range(10)]
    write_weights(tmp_path / "w.csv", ids, w)
    back_ids, back = read_weights(tmp_path / "w.csv")
    assert list(back_ids) == ids
    np.testing.assert_array_equal(back, w)


def test_entropy_balancer_estimator(rng):
    Xs = rng.normal(size=(100, 2))
    Xt = rng.normal(0.3, 1, size=(80, 2))
    eb = EntropyBalancer().fit(Xs, Xt, feature_names=["a", "b"])
    np.testing.assert_allclose(eb.weights_ @ Xs, Xt.mean(axis=0), atol=1e-8)
    assert eb.get_params() == {"order": 1, "tol": 1e-8, "max_iter": 100}
    assert eb.balance_report(Xs).names == ("a", "b")
