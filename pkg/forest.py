"""
Random forest

Bootstrap-aggregated, fully grown gini decision trees with sqrt(n_features)
candidate features per split. Leaves hold the fraction of positive (ad)
samples; the forest probability is the mean leaf fraction. Models are plain
JSON tree dumps with the feature names embedded.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import config

logger = logging.getLogger(__name__)

MODEL_FORMAT = "adchain-forest"
MODEL_VERSION = 1
LEAF = -1


class TrainingError(ValueError):
    """Training data the forest cannot learn from"""


class FeatureMismatchError(ValueError):
    """Features offered at prediction time differ from the model's"""


@dataclass
class DecisionTree:
    """Array-backed binary tree; x[feature] <= threshold goes left"""
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self, value: float) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(float(value))
        return len(self.feature) - 1

    def leaf_value(self, x: Sequence[float]) -> float:
        node = 0
        while self.feature[node] != LEAF:
            if x[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return self.value[node]

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DecisionTree":
        return cls(
            feature=[int(v) for v in data["feature"]],
            threshold=[float(v) for v in data["threshold"]],
            left=[int(v) for v in data["left"]],
            right=[int(v) for v in data["right"]],
            value=[float(v) for v in data["value"]],
        )


@dataclass
class ForestConfig:
    n_trees: int = config.N_TREES
    max_depth: Optional[int] = config.MAX_DEPTH
    seed: int = config.SEED
    cv_folds: int = config.CV_FOLDS
    recall_floor: float = config.RECALL_FLOOR
    # fixed threshold instead of choosing one on the CV folds
    decision_threshold: Optional[float] = config.DECISION_THRESHOLD
    # train on a subset of the feature registry (ablation)
    feature_names: Optional[tuple] = None

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "seed": self.seed,
            "cv_folds": self.cv_folds,
            "recall_floor": self.recall_floor,
            "decision_threshold": self.decision_threshold,
            "feature_names": list(self.feature_names) if self.feature_names else None,
        }


@dataclass
class ForestModel:
    trees: list[DecisionTree]
    feature_names: tuple
    decision_threshold: float = 0.5
    metadata: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.feature_names):
            raise FeatureMismatchError(
                f"expected {len(self.feature_names)} features, got {X.shape[1]}"
            )
        probs = np.zeros(X.shape[0])
        for tree in self.trees:
            probs += [tree.leaf_value(row) for row in X]
        return probs / max(len(self.trees), 1)

    def validate(self):
        """Children must follow their parent: no cycles, and every walk ends in a leaf"""
        n_features = len(self.feature_names)
        for t, tree in enumerate(self.trees):
            n = tree.node_count
            if n == 0:
                raise ValueError(f"tree {t} has no nodes")
            if not len(tree.threshold) == len(tree.left) == len(tree.right) == len(tree.value) == n:
                raise ValueError(f"tree {t} node arrays differ in length")
            for node in range(n):
                f = tree.feature[node]
                if f != LEAF and not 0 <= f < n_features:
                    raise ValueError(f"tree {t} node {node} splits on undeclared feature {f}")
                if f != LEAF:
                    for child in (tree.left[node], tree.right[node]):
                        if not node < child < n:
                            raise ValueError(f"tree {t} node {node} has child {child} outside ({node}, {n})")
                if f == LEAF and not 0.0 <= tree.value[node] <= 1.0:
                    raise ValueError(f"tree {t} leaf {node} fraction {tree.value[node]} outside [0, 1]")
        if not 0.0 <= self.decision_threshold or math.isnan(self.decision_threshold):
            raise ValueError(f"bad decision threshold {self.decision_threshold}")

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "feature_names": list(self.feature_names),
            "decision_threshold": self.decision_threshold,
            "metadata": self.metadata,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ForestModel":
        if data.get("format") != MODEL_FORMAT:
            raise ValueError(f"not a forest model (format={data.get('format')!r})")
        if data.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {data.get('version')}")
        model = cls(
            trees=[DecisionTree.from_dict(t) for t in data["trees"]],
            feature_names=tuple(data["feature_names"]),
            decision_threshold=float(data["decision_threshold"]),
            metadata=data.get("metadata", {}),
        )
        model.validate()
        return model

    def save(self, path: Path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)
        logger.info(f"Model saved to {path} ({self.n_trees} trees)")

    @classmethod
    def load(cls, path: Path) -> "ForestModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# =============================================================================
# Tree growing
# =============================================================================

def _best_split(xf: np.ndarray, y: np.ndarray) -> Optional[tuple[float, float]]:
    """(weighted gini, threshold) of the best split on one feature, None if constant"""
    order = np.argsort(xf, kind="stable")
    xs, ys = xf[order], y[order]
    n = len(xs)
    valid = xs[1:] != xs[:-1]
    if not valid.any():
        return None
    left_n = np.arange(1, n)
    right_n = n - left_n
    left_pos = np.cumsum(ys)[:-1]
    right_pos = ys.sum() - left_pos
    p_left = left_pos / left_n
    p_right = right_pos / right_n
    gini_left = 2.0 * p_left * (1.0 - p_left)
    gini_right = 2.0 * p_right * (1.0 - p_right)
    weighted = (left_n * gini_left + right_n * gini_right) / n
    weighted = np.where(valid, weighted, np.inf)
    i = int(np.argmin(weighted))
    threshold = (xs[i] + xs[i + 1]) / 2.0
    if threshold >= xs[i + 1]:
        threshold = xs[i]
    return float(weighted[i]), float(threshold)


def grow_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator,
              max_features: int, max_depth: Optional[int] = None) -> DecisionTree:
    """Grow one tree; constant features do not count against max_features"""
    tree = DecisionTree()
    root = tree.add_node(y.mean() if len(y) else 0.0)
    stack = [(root, np.arange(len(y)), 0)]
    n_features = X.shape[1]

    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        positives = ys.sum()
        if positives == 0 or positives == len(ys) or len(ys) < 2:
            continue
        if max_depth is not None and depth >= max_depth:
            continue

        best = None
        examined = 0
        for f in rng.permutation(n_features):
            split = _best_split(X[idx, f], ys)
            if split is None:
                continue
            examined += 1
            if best is None or split[0] < best[0]:
                best = (split[0], split[1], int(f))
            if examined >= max_features:
                break
        if best is None:
            continue

        _, threshold, f = best
        go_left = X[idx, f] <= threshold
        left_idx, right_idx = idx[go_left], idx[~go_left]
        tree.feature[node] = f
        tree.threshold[node] = threshold
        tree.left[node] = tree.add_node(y[left_idx].mean())
        tree.right[node] = tree.add_node(y[right_idx].mean())
        stack.append((tree.right[node], right_idx, depth + 1))
        stack.append((tree.left[node], left_idx, depth + 1))

    return tree


def fit_forest(X: np.ndarray, y: np.ndarray, feature_names: Sequence[str],
               n_trees: int, max_depth: Optional[int], seed: int) -> ForestModel:
    rng = np.random.default_rng(seed)
    n = len(y)
    max_features = max(1, int(math.sqrt(X.shape[1])))
    trees = []
    for _ in range(n_trees):
        sample = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[sample], y[sample], rng, max_features, max_depth))
    return ForestModel(trees=trees, feature_names=tuple(feature_names))


# =============================================================================
# Cross-validation and threshold selection
# =============================================================================

@dataclass
class Metrics:
    precision: float
    recall: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "accuracy": self.accuracy}


def score(y: np.ndarray, predicted: np.ndarray) -> Metrics:
    y = np.asarray(y, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    tp = int(np.sum(y & predicted))
    fp = int(np.sum(~y & predicted))
    fn = int(np.sum(y & ~predicted))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    accuracy = float(np.mean(y == predicted)) if len(y) else 0.0
    return Metrics(precision, recall, accuracy)


def choose_threshold(y: np.ndarray, probs: np.ndarray, recall_floor: float) -> float:
    """Highest-precision threshold whose recall stays at or above the floor (lowest on ties)"""
    best_t, best_p = None, -1.0
    for t in np.unique(probs):
        m = score(y, probs >= t)
        if m.recall >= recall_floor and m.precision > best_p:
            best_t, best_p = float(t), m.precision
    return best_t if best_t is not None else 0.5


def stratified_folds(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for label in (0, 1):
        members = rng.permutation(np.flatnonzero(y == label))
        for i, sample in enumerate(members):
            folds[i % k].append(int(sample))
    return [np.array(sorted(f), dtype=int) for f in folds]


@dataclass
class TrainingResult:
    model: ForestModel
    cv: Metrics
    fold_metrics: list[Metrics]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cv": self.cv.to_dict(),
            "folds": [m.to_dict() for m in self.fold_metrics],
            "decision_threshold": self.model.decision_threshold,
            "warnings": self.warnings,
        }


def train(X: np.ndarray, y: np.ndarray, feature_names: Sequence[str],
          forest_config: Optional[ForestConfig] = None) -> TrainingResult:
    """
    k-fold cross-validate, pick the decision threshold on the out-of-fold
    probabilities, then fit the final forest on all data. Deterministic given seed.
    """
    cfg = forest_config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)

    classes = set(np.unique(y).tolist())
    if classes != {0, 1}:
        raise TrainingError(f"training data needs both classes, got {sorted(classes)}")
    constant = [name for j, name in enumerate(feature_names) if np.all(X[:, j] == X[0, j])]
    if len(constant) == len(feature_names):
        raise TrainingError("every feature is constant")
    warnings = []
    if constant:
        warnings.append(f"constant features: {', '.join(constant)}")
        logger.warning(f"Constant features: {', '.join(constant)}")

    k = max(2, min(cfg.cv_folds, int(min(np.sum(y == 0), np.sum(y == 1)))))
    folds = stratified_folds(y, k, cfg.seed)
    oof = np.zeros(len(y))
    for i, test_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(y)), test_idx)
        fold_model = fit_forest(X[train_idx], y[train_idx], feature_names,
                                cfg.n_trees, cfg.max_depth, cfg.seed + i + 1)
        oof[test_idx] = fold_model.predict_proba(X[test_idx])

    if cfg.decision_threshold is not None:
        threshold = cfg.decision_threshold
    else:
        threshold = choose_threshold(y, oof, cfg.recall_floor)

    fold_metrics = [score(y[idx], oof[idx] >= threshold) for idx in folds]
    cv = Metrics(
        precision=float(np.mean([m.precision for m in fold_metrics])),
        recall=float(np.mean([m.recall for m in fold_metrics])),
        accuracy=float(np.mean([m.accuracy for m in fold_metrics])),
    )
    logger.info(
        f"{k}-fold CV: precision {cv.precision:.3f}, recall {cv.recall:.3f}, "
        f"accuracy {cv.accuracy:.3f} at threshold {threshold:.3f}"
    )

    model = fit_forest(X, y, feature_names, cfg.n_trees, cfg.max_depth, cfg.seed)
    model.decision_threshold = float(threshold)
    model.metadata = {
        "config": cfg.to_dict(),
        "cv": cv.to_dict(),
        "n_examples": int(len(y)),
        "n_ads": int(np.sum(y)),
    }
    return TrainingResult(model, cv, fold_metrics, warnings)
