import json

import numpy as np
import pytest

from forest import (
    LEAF,
    DecisionTree,
    FeatureMismatchError,
    ForestConfig,
    ForestModel,
    TrainingError,
    choose_threshold,
    fit_forest,
    score,
    stratified_folds,
    train,
)

FAST = dict(n_trees=25, max_depth=None, seed=3, cv_folds=5, recall_floor=0.5, decision_threshold=None)


def walk(tree: dict, x) -> float:
    node = 0
    while tree["feature"][node] != LEAF:
        branch = "left" if x[tree["feature"][node]] <= tree["threshold"][node] else "right"
        node = tree[branch][node]
    return tree["value"][node]


def separable_data(n=200, constants=3, seed=0):
    rng = np.random.default_rng(seed)
    third_party = rng.integers(0, 2, n)
    standard_size = rng.integers(0, 2, n)
    X = np.column_stack([third_party, standard_size] + [np.full(n, 7.0)] * constants).astype(float)
    y = third_party & standard_size
    names = ["is_third_party", "is_standard_ad_size"] + [f"constant{i}" for i in range(constants)]
    return X, y, names


def test_predict_matches_tree_walk():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(300, 6))
    y = (X[:, 0] + rng.normal(scale=0.5, size=300) > 0).astype(int)
    model = fit_forest(X, y, [f"f{i}" for i in range(6)], n_trees=15, max_depth=None, seed=4)

    points = rng.normal(size=(500, 6))
    trees = model.to_dict()["trees"]
    expected = [np.mean([walk(t, x) for t in trees]) for x in points]
    np.testing.assert_allclose(model.predict_proba(points), expected)


def test_leaves_hold_ad_fractions():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0, 1, 1, 1])
    tree = fit_forest(X, y, ["f"], n_trees=1, max_depth=None, seed=0).trees[0]
    for node in range(tree.node_count):
        assert 0.0 <= tree.value[node] <= 1.0
        if tree.feature[node] == LEAF:
            continue
        assert tree.left[node] != LEAF and tree.right[node] != LEAF


def test_max_depth_limits_trees():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 4))
    y = rng.integers(0, 2, 200)
    model = fit_forest(X, y, list("abcd"), n_trees=5, max_depth=2, seed=1)
    assert all(tree.node_count <= 7 for tree in model.trees)


def test_separable_data_reaches_full_precision():
    X, y, names = separable_data()
    result = train(X, y, names, ForestConfig(**FAST))
    assert result.cv.precision == 1.0
    assert result.cv.recall == 1.0
    assert len(result.fold_metrics) == 5
    assert any("constant" in w for w in result.warnings)
    probs = result.model.predict_proba(X)
    assert np.array_equal(probs >= result.model.decision_threshold, y.astype(bool))


def test_informative_feature_beats_its_ablation():
    rng = np.random.default_rng(5)
    n = 200
    y = rng.integers(0, 2, n)
    perceptual = np.where(y == 1, rng.uniform(0.6, 1.0, n), rng.uniform(0.0, 0.4, n))
    noise = rng.normal(size=(n, 3))
    X = np.column_stack([perceptual, noise])
    names = ["perceptual_ad_probability", "n0", "n1", "n2"]

    hybrid = train(X, y, names, ForestConfig(**FAST))
    ablated = train(X[:, 1:], y, names[1:], ForestConfig(**FAST))
    assert hybrid.cv.accuracy >= 0.9
    assert hybrid.cv.precision > ablated.cv.precision
    assert hybrid.cv.accuracy > ablated.cv.accuracy


def test_training_is_deterministic():
    X, y, names = separable_data(seed=9)
    first = train(X, y, names, ForestConfig(**FAST)).model.to_dict()
    second = train(X, y, names, ForestConfig(**FAST)).model.to_dict()
    assert first == second


def test_single_class_rejected():
    X = np.random.default_rng(0).normal(size=(20, 3))
    with pytest.raises(TrainingError, match="both classes"):
        train(X, np.zeros(20, dtype=int), ["a", "b", "c"])


def test_all_constant_rejected():
    X = np.ones((20, 2))
    y = np.array([0, 1] * 10)
    with pytest.raises(TrainingError, match="constant"):
        train(X, y, ["a", "b"])


def test_threshold_above_one_never_says_ad():
    X, y, names = separable_data()
    config = ForestConfig(**{**FAST, "decision_threshold": 1.01})
    result = train(X, y, names, config)
    assert result.model.decision_threshold == pytest.approx(1.01)
    assert not np.any(result.model.predict_proba(X) >= result.model.decision_threshold)
    assert result.cv.recall == 0.0


def test_save_and_load(tmp_path):
    X, y, names = separable_data()
    model = train(X, y, names, ForestConfig(**FAST)).model
    path = tmp_path / "model.json"
    model.save(path)
    loaded = ForestModel.load(path)
    assert loaded.feature_names == tuple(names)
    assert loaded.decision_threshold == model.decision_threshold
    assert loaded.metadata["n_examples"] == 200
    np.testing.assert_array_equal(loaded.predict_proba(X), model.predict_proba(X))


def test_load_rejects_foreign_files(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"format": "something-else", "version": 1}))
    with pytest.raises(ValueError, match="format"):
        ForestModel.load(path)

    tree = DecisionTree()
    tree.add_node(0.5)
    data = ForestModel([tree], ("a",)).to_dict()
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="version"):
        ForestModel.load(path)


def test_validate_rejects_undeclared_feature():
    tree = DecisionTree()
    root = tree.add_node(0.5)
    tree.feature[root] = 3
    tree.left[root] = tree.add_node(0.0)
    tree.right[root] = tree.add_node(1.0)
    with pytest.raises(ValueError, match="undeclared"):
        ForestModel([tree], ("a", "b")).validate()


def _split_model_dict() -> dict:
    tree = DecisionTree()
    root = tree.add_node(0.5)
    tree.feature[root] = 0
    tree.threshold[root] = 0.5
    tree.left[root] = tree.add_node(0.0)
    tree.right[root] = tree.add_node(1.0)
    return ForestModel([tree], ("a",)).to_dict()


@pytest.mark.parametrize("branch, child", [("left", 0), ("right", 0), ("left", 3), ("right", -1)])
def test_load_rejects_cyclic_or_dangling_children(tmp_path, branch, child):
    data = _split_model_dict()
    data["trees"][0][branch][0] = child
    path = tmp_path / "model.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="child"):
        ForestModel.load(path)


def test_load_rejects_ragged_tree_arrays(tmp_path):
    data = _split_model_dict()
    data["trees"][0]["value"].pop()
    path = tmp_path / "model.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="length"):
        ForestModel.load(path)


def test_well_formed_split_loads(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps(_split_model_dict()))
    model = ForestModel.load(path)
    np.testing.assert_array_equal(model.predict_proba(np.array([[0.0], [1.0]])), [0.0, 1.0])


def test_feature_count_mismatch():
    tree = DecisionTree()
    tree.add_node(1.0)
    model = ForestModel([tree], ("a", "b"))
    with pytest.raises(FeatureMismatchError):
        model.predict_proba(np.zeros((1, 3)))


def test_score_handles_empty_predictions():
    m = score(np.array([1, 0, 1]), np.array([False, False, False]))
    assert m.precision == 0.0
    assert m.recall == 0.0
    assert m.accuracy == pytest.approx(1 / 3)


def test_choose_threshold_prefers_precision_then_lowest():
    y = np.array([1, 1, 0, 0, 1])
    probs = np.array([0.9, 0.8, 0.7, 0.2, 0.6])
    # 0.8 and 0.9 both give precision 1.0, only 0.8 keeps recall >= 0.5
    assert choose_threshold(y, probs, 0.5) == pytest.approx(0.8)
    assert choose_threshold(y, probs, 1.0) == pytest.approx(0.6)

    tied = np.array([0.9, 0.9, 0.1, 0.1, 0.9])
    assert choose_threshold(y, tied, 0.5) == pytest.approx(0.9)
    # 0.8 and 0.9 tie on precision 1.0 at this floor
    assert choose_threshold(np.array([1, 1, 0]), np.array([0.9, 0.8, 0.1]), 0.5) == pytest.approx(0.8)


def test_stratified_folds_partition_and_balance():
    y = np.array([1] * 12 + [0] * 38)
    folds = stratified_folds(y, 4, seed=0)
    assert sorted(np.concatenate(folds).tolist()) == list(range(50))
    for fold in folds:
        assert y[fold].sum() == 3
