import csv
import itertools
import json
from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shapaudit.model import DecisionTree, GBDTParams, GradientBoostedModel, train_gbdt
from shapaudit.shapley import (
    CapabilityError,
    ShapMatrix,
    ValueFunctionConfig,
    additivity_check,
    exact_shapley,
    tree_shap,
    tree_shap_single,
    write_shap_csv,
    write_shap_summary,
)
from shapaudit.synthetic import planted_bias


def _naive_shapley(f, x, B):
    """Textbook permutation-free formula, one coalition at a time."""
    M = len(x)

    def v(S):
        Z = B.copy()
        Z[:, list(S)] = x[list(S)]
        return f(Z).mean()

    phi = np.zeros(M)
    for i in range(M):
        others = [j for j in range(M) if j != i]
        for k in range(M):
            for S in itertools.combinations(others, k):
                w = factorial(k) * factorial(M - k - 1) / factorial(M)
                phi[i] += w * (v(S + (i,)) - v(S))
    return phi


def test_constant_model_null_player():
    B = np.random.default_rng(0).normal(size=(5, 4))
    s = exact_shapley(lambda Z: np.full(len(Z), 0.37), B[:3], ValueFunctionConfig(B))
    assert np.all(s.phi == 0)
    assert s.phi0 == pytest.approx(0.37)


def test_linear_model_three_features_enumerated():
    rng = np.random.default_rng(1)
    w = np.array([0.5, -1.5, 2.0])
    B = rng.normal(size=(7, 3))
    X = rng.normal(size=(4, 3))
    f = lambda Z: Z @ w  # noqa: E731
    s = exact_shapley(f, X, ValueFunctionConfig(B))
    for r in range(4):
        np.testing.assert_allclose(s.phi[r], _naive_shapley(f, X[r], B), atol=1e-12)
    np.testing.assert_allclose(s.phi, w * (X - B.mean(axis=0)), atol=1e-12)


@pytest.mark.parametrize(
    "x, expected",
    [((1.0, 1.0, 1.0), (0.3, 0.1, 0.1)),  # individual A
     ((1.0 / 3, 3.0, 1.0), (0.1, 0.3, 0.1))],  # individual B
)
def test_two_individual_toy(x, expected):
    # score = 0.4 + 0.3*race + 0.1*income + 0.1*age, background at the origin
    f = lambda Z: 0.4 + Z @ np.array([0.3, 0.1, 0.1])  # noqa: E731
    s = exact_shapley(f, np.array([x]), ValueFunctionConfig(np.zeros((1, 3))), ("race", "income", "age"))
    np.testing.assert_allclose(s.phi[0], expected, atol=1e-12)
    assert s.phi0 == pytest.approx(0.4)
    assert s.model_scores[0] == pytest.approx(0.9)


def test_stump_attributes_only_split_feature():
    stump = DecisionTree(feature=[2, -1, -1], threshold=[0.5, 0, 0], left=[1, -1, -1], right=[2, -1, -1],
                         value=[0, -1.0, 2.0])
    m = GradientBoostedModel((stump,), 1.0, 0.0, "squared", 4)
    B = np.random.default_rng(2).normal(size=(20, 4))
    X = np.random.default_rng(3).normal(size=(10, 4))
    s = tree_shap(m, X, ValueFunctionConfig(B))
    assert np.all(s.phi[:, [0, 1, 3]] == 0)
    np.testing.assert_allclose(s.phi[:, 2], s.model_scores - s.phi0, atol=1e-14)


def _random_model(rng, M, n_trees, depth, n=120):
    X = rng.integers(0, 5, size=(n, M)).astype(float)
    coef = rng.normal(size=M)
    y = X @ coef + rng.normal(size=n)
    return train_gbdt(X, y, "squared", GBDTParams(n_trees=n_trees, max_depth=depth, min_child_rows=2,
                                                   learning_rate=0.3)), X


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_tree_matches_exact(M, n_trees, depth, seed):
    rng = np.random.default_rng(seed)
    m, X = _random_model(rng, M, n_trees, depth, n=60)
    vf = ValueFunctionConfig(X[:6])
    a = tree_shap(m, X[6:26], vf)
    b = exact_shapley(m, X[6:26], vf)
    np.testing.assert_allclose(a.phi, b.phi, atol=1e-8)
    assert a.phi0 == pytest.approx(b.phi0, abs=1e-12)
    assert additivity_check(a) <= 1e-9 and additivity_check(b) <= 1e-9


def test_linearity_over_trees():
    rng = np.random.default_rng(4)
    m, X = _random_model(rng, 5, 6, 3)
    B = X[:10]
    total = sum(tree_shap_single(t, X, B) for t in m.trees) * m.learning_rate
    np.testing.assert_allclose(tree_shap(m, X, ValueFunctionConfig(B)).phi, total, atol=1e-12)


def test_null_player_unused_feature():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(300, 4))
    m = train_gbdt(X[:, :3], X[:, 0] - X[:, 1], "squared", GBDTParams(n_trees=20))
    wide = GradientBoostedModel(m.trees, m.learning_rate, m.base_score, m.objective, 4)
    s = tree_shap(wide, X[:50], ValueFunctionConfig(X))
    assert np.all(s.phi[:, 3] == 0.0)
    e = exact_shapley(lambda Z: m.predict_raw(Z[:, :3]), X[:5], ValueFunctionConfig(X[:8]))
    assert np.all(e.phi[:, 3] == 0.0)


def test_symmetry():
    f = lambda Z: np.sin(Z[:, 0] + Z[:, 1]) + Z[:, 2]  # noqa: E731
    rng = np.random.default_rng(6)
    B = rng.normal(size=(9, 3))
    B[:, 1] = B[:, 0]
    x = rng.normal(size=(3, 3))
    x[:, 1] = x[:, 0]
    s = exact_shapley(f, x, ValueFunctionConfig(B))
    np.testing.assert_allclose(s.phi[:, 0], s.phi[:, 1], atol=1e-12)


def test_additivity_check_detects_fault():
    rng = np.random.default_rng(7)
    B = rng.normal(size=(6, 3))
    s = exact_shapley(lambda Z: Z.sum(axis=1) ** 2, B[:4], ValueFunctionConfig(B))
    assert additivity_check(s) <= 1e-9
    phi = s.phi.copy()
    phi[2, 1] += 0.1
    assert additivity_check(ShapMatrix(phi, s.phi0, s.model_scores)) == pytest.approx(0.1, abs=1e-9)


def test_additivity_on_500_rows():
    d, _ = planted_bias(n=800, seed=3)
    m = train_gbdt(d, d.score, "squared")
    s = tree_shap(m, d.rows[:500], ValueFunctionConfig(d))
    assert additivity_check(s) <= 1e-8


def test_capability_guard():
    with pytest.raises(CapabilityError, match="tree_shap"):
        exact_shapley(lambda Z: Z[:, 0], np.zeros((1, 21)), ValueFunctionConfig(np.zeros((1, 21))))
    with pytest.raises(TypeError):
        tree_shap(lambda Z: Z[:, 0], np.zeros((1, 2)), ValueFunctionConfig(np.zeros((1, 2))))


def test_background_cap_is_seeded():
    B = np.arange(1000.0).reshape(500, 2)
    a = ValueFunctionConfig(B, max_background=50, seed=3).rows()
    assert a.shape == (50, 2)
    np.testing.assert_array_equal(a, ValueFunctionConfig(B, max_background=50, seed=3).rows())
    assert not np.array_equal(a, ValueFunctionConfig(B, max_background=50, seed=4).rows())


def test_exports(tmp_path):
    rng = np.random.default_rng(8)
    m, X = _random_model(rng, 3, 4, 2)
    s = tree_shap(m, X[:5], ValueFunctionConfig(X), ("a", "b", "c"))
    write_shap_csv(s, tmp_path / "shap.csv")
    with open(tmp_path / "shap.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["row_id", "a", "b", "c", "phi0", "score"]
    assert len(rows) == 6
    assert float(rows[3][2]) == s.phi[2, 1]
    write_shap_summary(s, tmp_path / "summary.json")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["mean_abs_phi"]["c"] == pytest.approx(np.abs(s.phi[:, 2]).mean())
