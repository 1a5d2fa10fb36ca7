"""Second-order gradient boosting on logistic loss.

Per round a regression tree is fitted to gradients g_i = p_i - y_i and
hessians h_i = p_i (1 - p_i); leaf values are -sum(g) / (sum(h) + lambda) and
split gain is 0.5 * [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)]. The raw
margin base_score + eta * sum(trees) is the log-odds of class 1 (Recovered).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import FeatureMatrix
from .trees import FitError, FlatTree, TreeNode, apply_tree, flatten_tree

PREVALENCE_CLIP = 1e-6


@dataclass(frozen=True)
class GbdtParams:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    seed: int = 0
    # None = exact greedy splits over all midpoints; an integer caps the
    # candidate thresholds per feature at that many quantile bin edges
    histogram_bins: int | None = None


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def quantile_bin_edges(column: np.ndarray, bins: int) -> np.ndarray:
    """Up to bins-1 interior edges at quantile midpoints of distinct values."""
    distinct = np.unique(column)
    if len(distinct) <= 1:
        return np.empty(0)
    midpoints = (distinct[:-1] + distinct[1:]) / 2
    if len(midpoints) <= bins - 1:
        return midpoints
    positions = np.linspace(0, len(midpoints) - 1, bins - 1)
    return midpoints[np.unique(positions.round().astype(int))]


def _best_gain_split(X, g, h, rows, min_child_weight, lam, edges=None):
    """Best split by second-order gain; same tie-break as the CART search.

    With `edges` (per-feature candidate thresholds from quantile binning) the
    search only scans those cut points; otherwise every midpoint of distinct
    sorted values is a candidate (exact mode).
    """
    G = float(g[rows].sum())
    H = float(h[rows].sum())
    parent_score = G * G / (H + lam)
    best = None
    for f in range(X.shape[1]):
        xs = X[rows, f]
        order = np.argsort(xs, kind="stable")
        xs_sorted = xs[order]
        cum_g = np.cumsum(g[rows][order])
        cum_h = np.cumsum(h[rows][order])
        if edges is None:
            boundaries = np.flatnonzero(xs_sorted[:-1] < xs_sorted[1:])
            if len(boundaries) == 0:
                continue
            thresholds = (xs_sorted[boundaries] + xs_sorted[boundaries + 1]) / 2
        else:
            thresholds = edges[f]
            if len(thresholds) == 0:
                continue
            # rows strictly below each candidate threshold
            boundaries = np.searchsorted(xs_sorted, thresholds, side="left") - 1
            keep = (boundaries >= 0) & (boundaries < len(rows) - 1)
            boundaries = boundaries[keep]
            thresholds = thresholds[keep]
            if len(boundaries) == 0:
                continue
        gl = cum_g[boundaries]
        hl = cum_h[boundaries]
        gr = G - gl
        hr = H - hl
        valid = (hl >= min_child_weight) & (hr >= min_child_weight)
        if not valid.any():
            continue
        gains = np.full(len(boundaries), -np.inf)
        gains[valid] = 0.5 * (
            gl[valid] ** 2 / (hl[valid] + lam)
            + gr[valid] ** 2 / (hr[valid] + lam)
            - parent_score
        )
        b = int(np.argmax(gains))
        if gains[b] > 0.0 and (best is None or gains[b] > best[0]):
            best = (float(gains[b]), f, float(thresholds[b]))
    return best


def _fit_round_tree(X, g, h, w, params: GbdtParams, edges=None) -> TreeNode:
    lam = params.reg_lambda

    def grow(rows: np.ndarray, depth: int) -> TreeNode:
        cover = float(w[rows].sum())
        node = TreeNode(cover=cover)
        sum_g = float(g[rows].sum())
        sum_h = float(h[rows].sum())
        node.value = -sum_g / (sum_h + lam)
        if depth >= params.max_depth or len(rows) < 2:
            return node
        best = _best_gain_split(X, g, h, rows, params.min_child_weight, lam, edges)
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


class GradientBoostedModel:
    kind = "gbdt"

    def __init__(
        self,
        base_score: float,
        learning_rate: float,
        trees: list[TreeNode],
        feature_names: list[str],
        params: GbdtParams | None = None,
    ):
        self.base_score = base_score
        self.learning_rate = learning_rate
        self.trees = trees
        self.feature_names = list(feature_names)
        self.params = params
        self._flat: list[FlatTree] | None = None

    @property
    def flat_trees(self) -> list[FlatTree]:
        if self._flat is None:
            self._flat = [flatten_tree(t) for t in self.trees]
        return self._flat

    def _check_width(self, X: np.ndarray):
        if X.shape[1] != len(self.feature_names):
            raise FitError(
                f"expected {len(self.feature_names)} features, got {X.shape[1]}"
            )

    def raw_margin(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        self._check_width(X)
        margin = np.full(len(X), self.base_score)
        for flat in self.flat_trees:
            margin += self.learning_rate * apply_tree(flat, X)
        return margin

    def staged_margins(self, X: np.ndarray, checkpoints: list[int]) -> np.ndarray:
        """Margins after each prefix length in checkpoints, in one pass."""
        X = np.asarray(X, dtype=np.float64)
        self._check_width(X)
        bad = [t for t in checkpoints if t < 0 or t > len(self.trees)]
        if bad:
            raise FitError(f"checkpoints out of range: {bad}")
        margin = np.full(len(X), self.base_score)
        wanted = set(checkpoints)
        staged = {}
        if 0 in wanted:
            staged[0] = margin.copy()
        for t, flat in enumerate(self.flat_trees, start=1):
            margin += self.learning_rate * apply_tree(flat, X)
            if t in wanted:
                staged[t] = margin.copy()
        return np.vstack([staged[t] for t in checkpoints])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p1 = sigmoid(self.raw_margin(X))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.raw_margin(X) > 0.0).astype(np.int8)


def fit_gbdt(
    matrix: FeatureMatrix,
    params: GbdtParams = GbdtParams(),
    sample_weight: np.ndarray | None = None,
) -> GradientBoostedModel:
    """Boost params.n_rounds trees on logistic loss.

    base_score is the log-odds of the (weighted) training prevalence, clipped
    away from 0 and 1 so degenerate inputs stay finite.
    """
    if params.n_rounds < 1:
        raise FitError(f"n_rounds must be >= 1, got {params.n_rounds}")
    if matrix.labels is None:
        raise FitError("training matrix has no labels")
    X = matrix.values
    if np.isnan(X).any():
        raise FitError("training matrix contains NaN; impute before fitting")
    y = matrix.labels.astype(np.float64)
    n = len(y)
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    if w.shape != (n,):
        raise FitError("sample_weight must align with rows")

    prevalence = float(np.clip((w * y).sum() / w.sum(), PREVALENCE_CLIP, 1 - PREVALENCE_CLIP))
    base_score = float(np.log(prevalence / (1.0 - prevalence)))

    edges = None
    if params.histogram_bins is not None:
        if params.histogram_bins < 2:
            raise FitError(f"histogram_bins must be >= 2, got {params.histogram_bins}")
        edges = [quantile_bin_edges(X[:, f], params.histogram_bins) for f in range(X.shape[1])]

    margin = np.full(n, base_score)
    trees: list[TreeNode] = []
    for _ in range(params.n_rounds):
        p = sigmoid(margin)
        g = (p - y) * w
        h = np.maximum(p * (1.0 - p), 1e-16) * w
        tree = _fit_round_tree(X, g, h, w, params, edges)
        trees.append(tree)
        margin += params.learning_rate * apply_tree(flatten_tree(tree), X)
    return GradientBoostedModel(
        base_score=base_score,
        learning_rate=params.learning_rate,
        trees=trees,
        feature_names=matrix.column_names(),
        params=params,
    )
