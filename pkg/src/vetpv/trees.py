"""CART decision trees with exact greedy splits, plus the flattened-array tree
representation shared by prediction, boosting and Shapley attribution.

Split search is exact: thresholds are midpoints of consecutive distinct sorted
values, ties broken by lowest feature index then lowest threshold, so a
brute-force search over all candidates reproduces the chosen split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .matrix import FeatureMatrix


class FitError(ValueError):
    pass


class TreeNode:
    """Binary tree node; internal nodes route x via `x[feature] < threshold`.

    value is the leaf payload: P(Recovered) for classification trees, a raw
    additive score for boosted regression trees. cover is the weighted count
    of training rows that reached the node; cover(parent) == cover(left) +
    cover(right) by construction.
    """

    __slots__ = ("feature", "threshold", "left", "right", "value", "cover")

    def __init__(self, feature=None, threshold=None, left=None, right=None,
                 value=None, cover=0.0):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.value = value
        self.cover = cover

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def n_nodes(self) -> int:
        if self.is_leaf:
            return 1
        return 1 + self.left.n_nodes() + self.right.n_nodes()


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 6
    min_leaf: int = 1
    criterion: str = "gini"


def _gini(w0: float, w1: float) -> float:
    total = w0 + w1
    if total <= 0:
        return 0.0
    p0 = w0 / total
    p1 = w1 / total
    return 1.0 - p0 * p0 - p1 * p1


def _best_gini_split(X, y, w, rows, features, min_leaf):
    """Exact best split by weighted Gini impurity reduction.

    Returns (gain, feature, threshold) or None when no valid split improves
    impurity. Iterating features in ascending order with a strictly-greater
    comparison realizes the documented tie-break.
    """
    w_node = w[rows]
    y_node = y[rows]
    total_w = float(w_node.sum())
    total_w1 = float(w_node[y_node == 1].sum())
    parent = _gini(total_w - total_w1, total_w1)
    n = len(rows)

    best = None
    for f in features:
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        boundaries = np.flatnonzero(xs_sorted[:-1] < xs_sorted[1:])
        if len(boundaries) == 0:
            continue
        left_counts = boundaries + 1
        valid = (left_counts >= min_leaf) & (n - left_counts >= min_leaf)
        boundaries = boundaries[valid]
        if len(boundaries) == 0:
            continue
        ws = w_node[order]
        w1s = ws * (y_node[order] == 1)
        cum_w = np.cumsum(ws)
        cum_w1 = np.cumsum(w1s)
        wl = cum_w[boundaries]
        w1l = cum_w1[boundaries]
        w0l = wl - w1l
        wr = total_w - wl
        w1r = total_w1 - w1l
        w0r = wr - w1r
        with np.errstate(invalid="ignore", divide="ignore"):
            gini_l = 1.0 - (w0l / wl) ** 2 - (w1l / wl) ** 2
            gini_r = 1.0 - (w0r / wr) ** 2 - (w1r / wr) ** 2
        gains = parent - (wl * gini_l + wr * gini_r) / total_w
        b = int(np.argmax(gains))  # first max: lowest threshold
        if gains[b] > 0.0 and (best is None or gains[b] > best[0]):
            threshold = float((xs_sorted[boundaries[b]] + xs_sorted[boundaries[b] + 1]) / 2)
            best = (float(gains[b]), int(f), threshold)
    return best


def fit_cart(
    X: np.ndarray,
    y: np.ndarray,
    params: TreeParams = TreeParams(),
    sample_weight: np.ndarray | None = None,
    features_per_split: int | None = None,
    rng: np.random.Generator | None = None,
) -> TreeNode:
    """Grow a classification tree; stops at max_depth, min_leaf or purity.

    features_per_split, when given, samples that many candidate features at
    every node from the supplied generator (random-forest mode).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise FitError("training set is empty")
    if np.isnan(X).any():
        raise FitError("training matrix contains NaN; impute before fitting")
    if len(X) < params.min_leaf:
        raise FitError(f"need at least min_leaf={params.min_leaf} rows, got {len(X)}")
    if params.criterion != "gini":
        raise FitError(f"unsupported criterion {params.criterion!r}")
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    d = X.shape[1]
    if features_per_split is not None and rng is None:
        raise FitError("features_per_split requires an rng")

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        w_rows = w[rows]
        cover = float(w_rows.sum())
        w1 = float(w_rows[y[rows] == 1].sum())
        value = w1 / cover if cover > 0 else 0.0
        node = TreeNode(value=value, cover=cover)
        if depth >= params.max_depth or value in (0.0, 1.0) or len(rows) < 2 * params.min_leaf:
            return node
        if features_per_split is None:
            features = range(d)
        else:
            m = min(features_per_split, d)
            features = np.sort(rng.choice(d, size=m, replace=False))
        best = _best_gini_split(X, y, w, rows, features, params.min_leaf)
        if best is None:
            return node
        _, feature, threshold = best
        go_left = X[rows, feature] < threshold
        node.feature = feature
        node.threshold = threshold
        node.left = grow(rows[go_left], depth + 1)
        node.right = grow(rows[~go_left], depth + 1)
        node.value = None
        return node

    return grow(np.arange(len(X)), 0)


@dataclass
class FlatTree:
    """Array form of one tree: children == -1 marks a leaf."""

    children_left: np.ndarray
    children_right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.children_left)


def flatten_tree(root: TreeNode) -> FlatTree:
    nodes: list[TreeNode] = []

    def number(node: TreeNode) -> int:
        idx = len(nodes)
        nodes.append(node)
        if not node.is_leaf:
            number(node.left)
            number(node.right)
        return idx

    number(root)
    index = {id(node): i for i, node in enumerate(nodes)}
    n = len(nodes)
    flat = FlatTree(
        children_left=np.full(n, -1, dtype=np.int32),
        children_right=np.full(n, -1, dtype=np.int32),
        feature=np.full(n, -1, dtype=np.int32),
        threshold=np.zeros(n, dtype=np.float64),
        value=np.zeros(n, dtype=np.float64),
        cover=np.zeros(n, dtype=np.float64),
    )
    for i, node in enumerate(nodes):
        flat.cover[i] = node.cover
        if node.is_leaf:
            flat.value[i] = node.value
        else:
            flat.children_left[i] = index[id(node.left)]
            flat.children_right[i] = index[id(node.right)]
            flat.feature[i] = node.feature
            flat.threshold[i] = node.threshold
    return flat


def apply_tree(flat: FlatTree, X: np.ndarray) -> np.ndarray:
    """Leaf values for every row, by level-synchronous descent."""
    n = len(X)
    node = np.zeros(n, dtype=np.int32)
    active = flat.children_left[node] != -1
    while np.any(active):
        rows = np.flatnonzero(active)
        current = node[rows]
        go_left = X[rows, flat.feature[current]] < flat.threshold[current]
        node[rows] = np.where(
            go_left, flat.children_left[current], flat.children_right[current]
        )
        active = flat.children_left[node] != -1
    return flat.value[node]


def sqrt_features(d: int) -> int:
    return max(1, int(round(math.sqrt(d))))


class DecisionTreeModel:
    """Single CART classifier over a feature matrix."""

    kind = "tree"

    def __init__(self, root: TreeNode, feature_names: list[str], params: TreeParams):
        self.root = root
        self.feature_names = list(feature_names)
        self.params = params
        self._flat = None

    @property
    def flat_trees(self) -> list[FlatTree]:
        if self._flat is None:
            self._flat = [flatten_tree(self.root)]
        return self._flat

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != len(self.feature_names):
            raise FitError(
                f"expected {len(self.feature_names)} features, got {X.shape[1]}"
            )
        p1 = apply_tree(self.flat_trees[0], X)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int8)


def fit_tree(matrix: FeatureMatrix, params: TreeParams = TreeParams()) -> DecisionTreeModel:
    if matrix.labels is None:
        raise FitError("training matrix has no labels")
    root = fit_cart(matrix.values, matrix.labels, params)
    return DecisionTreeModel(root, matrix.column_names(), params)
