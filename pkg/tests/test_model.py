import itertools
import sys

import numpy as np
import pytest
from scipy.special import expit

from shapaudit.data import Dataset
from shapaudit.model import (
    DecisionTree,
    GBDTParams,
    GradientBoostedModel,
    ModelOracle,
    OracleError,
    ScoreColumnOracle,
    SubprocessOracle,
    TrainingError,
    auc,
    calibration_table,
    distill,
    train_gbdt,
)


def _pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def _synthetic(n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([rng.normal(size=n), rng.integers(0, 4, n), rng.normal(size=n), rng.integers(0, 2, n),
                         rng.uniform(-1, 1, n)])
    return X


def test_constant_target_logistic():
    X = _synthetic(100)
    m = train_gbdt(X, np.ones(100), "logistic", GBDTParams(n_trees=20))
    assert (m.predict(X) >= 0.99).all()


def test_separable_stump():
    rng = np.random.default_rng(3)
    X = np.column_stack([rng.normal(size=200), rng.normal(size=200)])
    y = (X[:, 1] > 0.1).astype(float)
    m = train_gbdt(X, y, "logistic", GBDTParams(n_trees=10, max_depth=1, learning_rate=0.5, min_child_rows=1))
    assert np.mean((m.predict(X) >= 0.5) == (y == 1)) == 1.0
    assert all(t.feature[0] == 1 for t in m.trees)


@pytest.mark.parametrize("objective", ["logistic", "squared"])
def test_training_loss_non_increasing(objective):
    X = _synthetic(500, seed=2)
    y = expit(X[:, 0] - X[:, 2] + 0.3 * X[:, 1])
    if objective == "logistic":
        y = (np.random.default_rng(0).random(500) < y).astype(float)
    m = train_gbdt(X, y, objective, GBDTParams(n_trees=40))
    assert np.all(np.diff(m.train_loss) <= 1e-12)


def test_training_errors():
    with pytest.raises(TrainingError):
        train_gbdt(np.empty((0, 2)), np.empty(0), "squared")
    with pytest.raises(TrainingError):
        train_gbdt(_synthetic(20), np.zeros(20), "squared", GBDTParams(max_depth=0))
    with pytest.raises(TrainingError):
        train_gbdt(_synthetic(20), np.full(20, 2.0), "logistic")
    with pytest.raises(TrainingError):
        train_gbdt(_synthetic(20), np.zeros(19), "squared")


def test_determinism_serialization():
    X = _synthetic(300, seed=5)
    y = (X[:, 0] > 0).astype(float)
    p = GBDTParams(n_trees=15, subsample=0.7)
    a = train_gbdt(X, y, "logistic", p, seed=9).to_json()
    b = train_gbdt(X, y, "logistic", p, seed=9).to_json()
    assert a == b
    assert GradientBoostedModel.from_json(a).to_json() == a


def test_empty_ensemble_predicts_sigmoid_base():
    m = GradientBoostedModel((), 0.1, 0.7, "logistic", 3)
    np.testing.assert_allclose(m.predict(np.zeros((4, 3))), expit(0.7))


def test_hand_traced_tree():
    #        [x0 <= 1.5]
    #       /           \
    #  [x1 <= 0]        leaf +1
    #   /      \
    # leaf -1  leaf +1
    tree = DecisionTree(feature=[0, 1, -1, -1, -1], threshold=[1.5, 0.0, 0, 0, 0], left=[1, 3, -1, -1, -1],
                        right=[2, 4, -1, -1, -1], value=[0, 0, 1.0, -1.0, 1.0])
    m = GradientBoostedModel((tree,), 0.5, 0.25, "squared", 2)
    X = np.array([[1.5, 0.0], [1.5, 0.1], [2.0, -5.0], [0.0, -1.0]])
    np.testing.assert_allclose(m.predict(X), [0.25 - 0.5, 0.25 + 0.5, 0.25 + 0.5, 0.25 - 0.5])


def test_malformed_tree_rejected():
    with pytest.raises(ValueError):
        DecisionTree(feature=[0, -1], threshold=[0, 0], left=[1, -1], right=[5, -1], value=[0, 0])
    with pytest.raises(ValueError):
        DecisionTree(feature=[0, -1, -1], threshold=[0, 0, 0], left=[1, -1, -1], right=[1, -1, -1],
                     value=[0, 0, 0])


def test_predict_batch_equals_rowwise_and_checks_width():
    X = _synthetic(60, seed=1)
    m = train_gbdt(X, (X[:, 0] > 0).astype(float), "logistic", GBDTParams(n_trees=10, min_child_rows=3))
    rowwise = np.array([m.predict(x[None, :])[0] for x in X])
    np.testing.assert_array_equal(m.predict(X), rowwise)
    with pytest.raises(ValueError):
        m.predict(X[:, :3])


def test_batch_of_1555():
    X = _synthetic(1555)
    m = train_gbdt(X[:300], (X[:300, 2] > 0).astype(float), "logistic", GBDTParams(n_trees=5))
    assert m.predict(X).shape == (1555,)


def test_removing_last_tree_is_additive():
    X = _synthetic(200, seed=4)
    m = train_gbdt(X, X[:, 0] + X[:, 2], "squared", GBDTParams(n_trees=12))
    diff = m.predict_raw(X) - m.truncated(11).predict_raw(X)
    np.testing.assert_allclose(diff, m.learning_rate * m.trees[-1].predict(X), atol=1e-12)


def _score_dataset(X, score):
    return Dataset(X, tuple(f"f{i}" for i in range(X.shape[1])), (score > 0.5).astype(int), score)


def test_self_distillation():
    X = _synthetic(600, seed=7)
    teacher = train_gbdt(X, expit(2 * X[:, 0] + X[:, 1] - 1), "squared", GBDTParams(n_trees=30))
    d = _score_dataset(X, np.clip(teacher.predict(X), 0, 1))
    res = distill(ScoreColumnOracle(d), d, GBDTParams(), seed=0)
    assert res.fidelity_kind == "r2" and res.fidelity >= 0.99


def test_distill_idempotent_on_mimic():
    X = _synthetic(600, seed=8)
    d = _score_dataset(X, expit(X[:, 0] * X[:, 2] + np.sin(3 * X[:, 4])))
    first = distill(ScoreColumnOracle(d), d, GBDTParams(n_trees=50))
    second = distill(ModelOracle(first.model), d, GBDTParams(n_trees=50))
    assert second.fidelity >= first.fidelity - 1e-6


def test_constant_oracle():
    X = _synthetic(200)
    d = _score_dataset(X, np.full(200, 0.5))
    res = distill(ScoreColumnOracle(d), d)
    np.testing.assert_allclose(res.model.predict(X), 0.5, atol=0.01)


def test_logistic_oracle_mimic_auc():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(2000, 5))
    p = expit(X @ np.array([1.0, -0.7, 0.5, 0.3, -1.2]))
    d = _score_dataset(X, p)
    res = distill(ScoreColumnOracle(d), d)
    assert auc(res.model.predict(X), (p >= 0.5).astype(int)) >= 0.95


def test_hard_oracle_uses_logistic():
    X = _synthetic(300)
    d = _score_dataset(X, (X[:, 0] > 0).astype(float))
    res = distill(ScoreColumnOracle(d), d)
    assert res.model.objective == "logistic" and res.fidelity_kind == "agreement"
    assert res.fidelity > 0.95


ORACLE_SCRIPT = """
import sys
for line in sys.stdin:
    cells = line.strip().split(",")
    print(0.8 if cells[1] == "a" else 0.3)
"""


def _cat_dataset(n=25):
    rng = np.random.default_rng(0)
    rows = np.column_stack([rng.normal(size=n), rng.integers(0, 2, n)])
    return Dataset(rows, ("x", "g"), rng.integers(0, 2, n), encodings={"g": ["a", "b"]})


def test_subprocess_oracle(tmp_path):
    script = tmp_path / "oracle.py"
    script.write_text(ORACLE_SCRIPT)
    d = _cat_dataset()
    out = SubprocessOracle([sys.executable, str(script)], batch_size=7).query(d)
    np.testing.assert_allclose(out, np.where(d.column("g") == 0, 0.8, 0.3))


def test_subprocess_oracle_failures(tmp_path):
    bad = tmp_path / "bad.py"
    bad.write_text("import sys\nsys.stdin.read()\nprint('0.5')\n")
    with pytest.raises(OracleError, match="rows 0..9"):
        SubprocessOracle([sys.executable, str(bad)], batch_size=10).query(_cat_dataset())
    crash = tmp_path / "crash.py"
    crash.write_text("import sys\nsys.exit(3)\n")
    with pytest.raises(OracleError, match="exited 3"):
        SubprocessOracle([sys.executable, str(crash)]).query(_cat_dataset())
    garbage = tmp_path / "garbage.py"
    garbage.write_text("import sys\nfor _ in sys.stdin: print('x')\n")
    with pytest.raises(OracleError, match="malformed"):
        SubprocessOracle([sys.executable, str(garbage)]).query(_cat_dataset())


def test_auc_examples():
    assert auc([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert _pairwise_auc(scores, labels) == 0.75
    assert auc(scores, labels) == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(2, 40)
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(rng.random(n), 1)  # coarse values force ties
        assert auc(s, y) == pytest.approx(_pairwise_auc(s, y), abs=1e-12)


def test_calibration_monte_carlo():
    rng = np.random.default_rng(0)
    gaps = []
    for n in (1_000, 100_000):
        s = rng.random(n)
        y = rng.random(n) < s
        gaps.append(max(b.gap for b in calibration_table(s, y, 10) if b.count))
    assert gaps[1] < gaps[0] and gaps[1] < 0.01


def test_calibration_extremes():
    t = calibration_table(np.ones(5), np.ones(5), 4)
    assert [b.count for b in t] == [0, 0, 0, 5]
    assert t[-1].gap == 0 and t[0].mean_score is None
    assert calibration_table(np.ones(5), np.zeros(5), 4)[-1].gap == 1.0
    with pytest.raises(ValueError):
        calibration_table([0.5], [1], 1)
