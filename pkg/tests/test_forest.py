import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ventriq.errors import DegenerateLabels, DimensionError, FormatError
from ventriq.forest import (
    RandomForest, Tree, _best_split, forest_predict, load_forest, rf_from_bytes, rf_to_bytes, save_forest, train_forest,
)


def stump(p_left=0.0, p_right=1.0):
    return Tree(np.array([0, -1, -1], np.int32), np.array([0.0, 0, 0]), np.array([1, -1, -1], np.int32),
                np.array([2, -1, -1], np.int32), np.array([0.5, p_left, p_right]))


def separable(rng, n=50):
    x = np.concatenate([rng.uniform(-5, -0.1, n // 2), rng.uniform(0.1, 5, n - n // 2)])
    return x[:, None], (x > 0).astype(int)


def test_separable_training_accuracy(rng):
    X, y = separable(rng)
    rf = train_forest(X, y, n_trees=25, max_depth=3, seed=1)
    assert np.array_equal(forest_predict(rf, X) >= 0.5, y == 1)


def test_single_class_labels():
    with pytest.raises(DegenerateLabels):
        train_forest(np.arange(6.0)[:, None], np.ones(6))


def test_same_seed_same_forest(rng):
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] + 0.3 * X[:, 2] > 0).astype(int)
    a, b = train_forest(X, y, 10, 4, seed=5), train_forest(X, y, 10, 4, seed=5)
    assert rf_to_bytes(a) == rf_to_bytes(b)
    assert rf_to_bytes(a) != rf_to_bytes(train_forest(X, y, 10, 4, seed=6))


def test_stump_predictions():
    rf = RandomForest([stump()], 1, 1, 0)
    assert forest_predict(rf, [-1.0]) == 0.0
    assert forest_predict(rf, [1.0]) == 1.0


def test_two_tree_average():
    rf = RandomForest([stump(0.0, 0.0), stump(1.0, 1.0)], 1, 1, 0)
    assert forest_predict(rf, [3.0]) == 0.5


def test_margin_cases(rng):
    X, y = separable(rng)
    rf = train_forest(X, y, n_trees=25, max_depth=3, seed=2)
    assert forest_predict(rf, [10.0]) >= 0.9
    assert forest_predict(rf, [-10.0]) <= 0.1


def test_schema_mismatch(rng):
    rf = RandomForest([stump()], 1, 1, 0)
    with pytest.raises(DimensionError):
        forest_predict(rf, [1.0, 2.0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_predictions_in_unit_interval_and_duplicate_invariant(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(30, 3))
    y = r.integers(0, 2, 30)
    y[:2] = (0, 1)
    rf = train_forest(X, y, 5, 3, seed)
    q = r.normal(size=(10, 3)) * 3
    p = forest_predict(rf, q)
    assert np.all((p >= 0) & (p <= 1))
    doubled = RandomForest(rf.trees * 2, rf.n_features, rf.max_depth, rf.seed)
    assert np.allclose(forest_predict(doubled, q), p, rtol=0, atol=1e-15)
    one = RandomForest(rf.trees[:1], 3, 3, 0)
    two = RandomForest(rf.trees[:1] * 2, 3, 3, 0)
    assert np.array_equal(forest_predict(one, q), forest_predict(two, q))


def test_depth_limit(rng):
    X = rng.normal(size=(200, 4))
    y = (np.sin(3 * X[:, 0]) + X[:, 1] > 0).astype(int)
    rf = train_forest(X, y, 5, 3, 0)
    assert max(t.depth for t in rf.trees) <= 3


def test_tie_break_lowest_feature_then_threshold():
    x = np.array([-2, -1, 1, 2.0])
    y = np.array([0, 0, 1, 1.0])
    g, f, thr = _best_split(np.c_[x, x], y, [0, 1])
    assert (g, f, thr) == (0.0, 0, 0.0)
    # equal Gini at two thresholds: the lower one wins
    g, f, thr = _best_split(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 1, 1, 0.0]), [0])
    assert thr == 0.5


def test_serialization_round_trip(tmp_path, rng):
    X = rng.normal(size=(40, 5))
    y = (X[:, 1] > 0).astype(int)
    rf = train_forest(X, y, 7, 4, 3)
    save_forest(rf, tmp_path / "f.rf")
    back = load_forest(tmp_path / "f.rf")
    assert rf_to_bytes(back) == rf_to_bytes(rf)
    assert np.array_equal(forest_predict(back, X), forest_predict(rf, X))
    with pytest.raises(FormatError):
        rf_from_bytes(rf_to_bytes(rf)[:-3])
    with pytest.raises(FormatError):
        rf_from_bytes(b"XX")
