#!/usr/bin/env python3
"""
Random forest classifier built from scratch.
Bagged CART trees with Gini splitting, mean-decrease-in-impurity importances,
soft-vote likelihoods and Monte Carlo confidence intervals over trees.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .exceptions import ConfigurationError, DimensionError, MetricDomainError, TrainingError
from .seeding import derive_rng

logger = logging.getLogger(__name__)

_EPS = 1e-12
LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    mtry: Optional[int] = None  # floor(sqrt(p)) when None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigurationError("n_trees must be at least 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigurationError("max_depth must be a positive integer or None")
        if self.min_samples_leaf < 1:
            raise ConfigurationError("min_samples_leaf must be at least 1")

    def resolved_mtry(self, n_features: int) -> int:
        mtry = self.mtry if self.mtry is not None else max(1, int(math.floor(math.sqrt(n_features))))
        if not 1 <= mtry <= n_features:
            raise ConfigurationError(f"mtry must be in [1, {n_features}], got {mtry}")
        return mtry

    @classmethod
    def from_config(cls, section: Dict, seed: int = 0) -> "ForestParams":
        return cls(
            n_trees=int(section.get("n_trees", 500)),
            max_depth=section.get("max_depth"),
            min_samples_leaf=int(section.get("min_samples_leaf", 1)),
            mtry=section.get("mtry"),
            bootstrap=bool(section.get("bootstrap", True)),
            seed=seed,
        )


def gini_impurity(class_counts: Sequence[int]) -> float:
    """
    Gini impurity 1 - sum(p_c^2) of a node.

    Args:
        class_counts: (negatives, positives)

    Returns:
        Impurity in [0, 0.5] for two classes
    """
    total = sum(class_counts)
    if total <= 0:
        raise MetricDomainError("Gini impurity is undefined for an empty node")
    return 1.0 - sum((c / total) ** 2 for c in class_counts)


@dataclass(frozen=True)
class Split:
    feature_index: int
    threshold: float
    impurity_decrease: float


def best_split(
    X: np.ndarray, y: np.ndarray, candidate_features: Sequence[int], min_samples_leaf: int = 1
) -> Optional[Split]:
    """
    Best Gini split over the candidate features.

    Thresholds are midpoints between consecutive distinct sorted values; rows with
    value <= threshold go left. Ties go to the lowest feature index, then the lowest threshold.

    Args:
        X: Node rows
        y: Binary labels of the node rows
        candidate_features: Feature indices to search
        min_samples_leaf: Minimum rows on each side

    Returns:
        Split with the largest weighted impurity decrease, or None if nothing decreases impurity
    """
    n = len(y)
    if n < 2:
        return None
    positives = float(np.sum(y))
    parent = gini_impurity((n - positives, positives))
    if parent == 0.0:
        return None

    left_n = np.arange(1, n, dtype=float)
    right_n = n - left_n
    size_ok = (left_n >= min_samples_leaf) & (right_n >= min_samples_leaf)

    best = None
    for f in sorted(int(f) for f in candidate_features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left_pos = np.cumsum(y[order])[:-1].astype(float)
        valid = size_ok & (xs[1:] > xs[:-1])
        if not valid.any():
            continue

        ln, lp = left_n[valid], left_pos[valid]
        rn, rp = right_n[valid], positives - lp
        left_gini = 1.0 - (lp / ln) ** 2 - ((ln - lp) / ln) ** 2
        right_gini = 1.0 - (rp / rn) ** 2 - ((rn - rp) / rn) ** 2
        decrease = parent - (ln / n * left_gini + rn / n * right_gini)

        k = int(np.flatnonzero(decrease >= decrease.max() - _EPS)[0])
        if best is None or decrease[k] > best.impurity_decrease + _EPS:
            lower, upper = xs[:-1][valid][k], xs[1:][valid][k]
            best = Split(feature_index=f, threshold=float((lower + upper) / 2.0), impurity_decrease=float(decrease[k]))

    if best is None or best.impurity_decrease <= _EPS:
        return None
    return best


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Arena of nodes; leaves have feature == -1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 2): negatives, positives
    depth: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        nodes = np.zeros(X.shape[0], dtype=int)
        active = self.feature[nodes] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[nodes] != LEAF
        return nodes

    def predict_proportion(self, X: np.ndarray) -> np.ndarray:
        """Positive-class proportion of the leaf each row lands in."""
        leaf_counts = self.counts[self.apply(X)]
        return leaf_counts[:, 1] / leaf_counts.sum(axis=1)

    def to_dict(self) -> Dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
            "depth": self.depth.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "DecisionTree":
        return cls(
            feature=np.asarray(data["feature"], dtype=int),
            threshold=np.asarray(data["threshold"], dtype=float),
            left=np.asarray(data["left"], dtype=int),
            right=np.asarray(data["right"], dtype=int),
            counts=np.asarray(data["counts"], dtype=int).reshape(-1, 2),
            depth=np.asarray(data["depth"], dtype=int),
        )


def fit_tree(
    X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator
) -> Tuple[DecisionTree, np.ndarray]:
    """
    Grow one CART tree depth-first.

    Returns:
        (tree, raw importances) where raw importances are sum over splits of
        (node rows / root rows) * impurity decrease
    """
    n_rows, n_features = X.shape
    mtry = params.resolved_mtry(n_features)
    importance = np.zeros(n_features)

    feature, threshold, left, right, counts, depth = [], [], [], [], [], []

    def new_node(index: np.ndarray, node_depth: int) -> int:
        positives = int(y[index].sum())
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        counts.append((len(index) - positives, positives))
        depth.append(node_depth)
        return len(feature) - 1

    root = new_node(np.arange(n_rows), 0)
    stack = [(root, np.arange(n_rows), 0)]
    while stack:
        node, index, node_depth = stack.pop()
        n_neg, n_pos = counts[node]
        if n_neg == 0 or n_pos == 0:
            continue
        if params.max_depth is not None and node_depth >= params.max_depth:
            continue
        if len(index) < 2 * params.min_samples_leaf:
            continue

        candidates = np.sort(rng.choice(n_features, size=mtry, replace=False))
        split = best_split(X[index], y[index], candidates, params.min_samples_leaf)
        if split is None:
            continue

        goes_left = X[index, split.feature_index] <= split.threshold
        left_node = new_node(index[goes_left], node_depth + 1)
        right_node = new_node(index[~goes_left], node_depth + 1)
        feature[node] = split.feature_index
        threshold[node] = split.threshold
        left[node] = left_node
        right[node] = right_node
        importance[split.feature_index] += len(index) / n_rows * split.impurity_decrease

        stack.append((right_node, index[~goes_left], node_depth + 1))
        stack.append((left_node, index[goes_left], node_depth + 1))

    tree = DecisionTree(
        feature=np.asarray(feature, dtype=int),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=int),
        right=np.asarray(right, dtype=int),
        counts=np.asarray(counts, dtype=int).reshape(-1, 2),
        depth=np.asarray(depth, dtype=int),
    )
    return tree, importance


@dataclass(frozen=True, eq=False)
class Forest:
    trees: Tuple[DecisionTree, ...]
    params: ForestParams
    feature_names: Tuple[str, ...]
    importances: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def tree_outputs(self, X: np.ndarray) -> np.ndarray:
        """(n_trees, n_rows) leaf positive proportions."""
        X = self._check(X)
        return np.vstack([tree.predict_proportion(X) for tree in self.trees])

    def predict_many(self, X: np.ndarray) -> np.ndarray:
        return self.tree_outputs(X).mean(axis=0)

    def ranked_importances(self) -> List[Tuple[str, float]]:
        pairs = list(zip(self.feature_names, self.importances.tolist()))
        return sorted(pairs, key=lambda pair: (-pair[1], pair[0]))

    def to_dict(self) -> Dict:
        return {
            "params": asdict(self.params),
            "feature_names": list(self.feature_names),
            "importances": self.importances.tolist(),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Forest":
        return cls(
            trees=tuple(DecisionTree.from_dict(t) for t in data["trees"]),
            params=ForestParams(**data["params"]),
            feature_names=tuple(data["feature_names"]),
            importances=np.asarray(data["importances"], dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        return cls.from_dict(json.loads(text))

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
        logger.info(f"✅ Forest saved to: {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Forest":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def _grow(X: np.ndarray, y: np.ndarray, params: ForestParams, tree_index: int) -> Tuple[DecisionTree, np.ndarray]:
    rng = derive_rng(params.seed, "tree", tree_index)
    n = X.shape[0]
    rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
    return fit_tree(X[rows], y[rows], params, rng)


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    params: ForestParams,
    feature_names: Optional[Sequence[str]] = None,
    threads: int = 1,
) -> Forest:
    """
    Train a bagged forest.

    Args:
        X: Training rows
        y: Binary labels
        params: Forest hyperparameters (params.seed is the master seed)
        feature_names: Column names, defaults to f0..f{p-1}
        threads: Parallel width over trees; results do not depend on it

    Returns:
        Trained Forest with normalised importances
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.shape[0] < 2:
        raise TrainingError("forest training needs at least 2 rows")
    if y.min() == y.max():
        raise TrainingError("forest training needs both classes")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise DimensionError(f"{len(names)} feature names for {X.shape[1]} columns")
    params.resolved_mtry(X.shape[1])

    grown = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_grow)(X, y, params, t) for t in range(params.n_trees)
    )

    # Fixed tree-order reduction
    total = np.zeros(X.shape[1])
    for _, raw in grown:
        mass = raw.sum()
        if mass > 0:
            total = total + raw / mass
    importances = total / total.sum() if total.sum() > 0 else total

    return Forest(
        trees=tuple(tree for tree, _ in grown),
        params=params,
        feature_names=names,
        importances=importances,
    )


def predict_likelihood(forest: Forest, x: Sequence[float]) -> float:
    """
    Soft-vote likelihood: mean over trees of the leaf positive proportion.

    Args:
        forest: Trained forest
        x: One feature vector

    Returns:
        Likelihood in [0, 1]
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != forest.n_features:
        raise DimensionError(f"expected a vector of {forest.n_features} features, got shape {x.shape}")
    return float(forest.tree_outputs(x[None, :])[:, 0].mean())


@dataclass(frozen=True)
class PredictionWithCI:
    likelihood: float
    ci_low: float
    ci_high: float
    level: float
    n_resamples: int
    degenerate: bool = False


def predict_with_ci(
    forest: Forest, x: Sequence[float], level: float = 0.95, n_resamples: int = 1000, seed: int = 0
) -> PredictionWithCI:
    """
    Likelihood with a percentile confidence interval from resampling trees with replacement.

    Args:
        forest: Trained forest
        x: One feature vector
        level: Interval level in (0, 1)
        n_resamples: Monte Carlo resamples, at least 100
        seed: Seed of the resampler

    Returns:
        PredictionWithCI; a one-tree forest gives a zero-width interval flagged degenerate
    """
    if n_resamples < 100:
        raise ConfigurationError("n_resamples must be at least 100")
    if not 0.0 < level < 1.0:
        raise ConfigurationError("level must be in (0, 1)")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != forest.n_features:
        raise DimensionError(f"expected a vector of {forest.n_features} features, got shape {x.shape}")

    outputs = forest.tree_outputs(x[None, :])[:, 0]
    likelihood = float(outputs.mean())
    if len(outputs) == 1:
        logger.warning("Single-tree forest: confidence interval is degenerate")
        return PredictionWithCI(likelihood, likelihood, likelihood, level, n_resamples, degenerate=True)

    rng = derive_rng(seed, "ci")
    picks = rng.integers(0, len(outputs), size=(n_resamples, len(outputs)))
    means = outputs[picks].mean(axis=1)
    low, high = np.percentile(means, [100.0 * (1.0 - level) / 2.0, 100.0 * (1.0 + level) / 2.0])
    return PredictionWithCI(
        likelihood=likelihood,
        ci_low=float(min(low, likelihood)),
        ci_high=float(max(high, likelihood)),
        level=level,
        n_resamples=n_resamples,
    )
