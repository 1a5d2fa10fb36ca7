"""Training-set rebalancing: random over/undersampling, SMOTE, Wilson editing
and their composition.

Neighbor searches run in a standardized distance space built from the numeric
columns (z-scores fitted on the input matrix); indicator and categorical
columns do not contribute to distances but are interpolated and then rounded
back to valid values when synthesizing rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import FeatureMatrix

VALID_STRATEGIES = ("none", "oversample", "undersample", "smote", "smote_enn")


class ResampleError(ValueError):
    pass


@dataclass(frozen=True)
class ResamplePlan:
    strategy: str = "none"
    target_ratio: float = 1.0  # minority/majority after resampling
    k_smote: int = 5
    k_enn: int = 3
    seed: int = 0
    enn_mode: str = "majority_only"  # or "all" for classic Wilson editing

    def __post_init__(self):
        if self.strategy not in VALID_STRATEGIES:
            raise ResampleError(f"unknown strategy {self.strategy!r}")
        if not (0 < self.target_ratio <= 1):
            raise ResampleError(f"target_ratio must be in (0, 1], got {self.target_ratio}")
        if self.k_smote < 1 or self.k_enn < 1:
            raise ResampleError("k values must be >= 1")
        if self.enn_mode not in ("majority_only", "all"):
            raise ResampleError(f"unknown enn_mode {self.enn_mode!r}")


def _class_split(matrix: FeatureMatrix) -> tuple[int, int, np.ndarray, np.ndarray]:
    """Returns (minority_class, majority_class, minority_idx, majority_idx)."""
    if matrix.labels is None:
        raise ResampleError("resampling requires labels")
    classes, counts = np.unique(matrix.labels, return_counts=True)
    if len(classes) != 2:
        raise ResampleError(f"binary labels required, found classes {classes.tolist()}")
    if counts.min() == 0:
        raise ResampleError("both classes must be non-empty")
    minority = int(classes[np.argmin(counts)])
    majority = int(classes[np.argmax(counts)])
    if minority == majority:  # tie: lower label is treated as minority
        minority, majority = int(classes[0]), int(classes[1])
    return (
        minority,
        majority,
        np.flatnonzero(matrix.labels == minority),
        np.flatnonzero(matrix.labels == majority),
    )


def random_resample(matrix: FeatureMatrix, plan: ResamplePlan) -> FeatureMatrix:
    """Duplicate minority rows (oversample) or remove majority rows
    (undersample), uniformly at random, until minority/majority reaches the
    plan's target ratio."""
    if plan.strategy not in ("oversample", "undersample"):
        raise ResampleError(f"random_resample cannot run strategy {plan.strategy!r}")
    minority, _, min_idx, maj_idx = _class_split(matrix)
    rng = np.random.default_rng(plan.seed)
    if plan.strategy == "oversample":
        target = int(round(plan.target_ratio * len(maj_idx)))
        deficit = target - len(min_idx)
        if deficit <= 0:
            return matrix
        extra = rng.choice(min_idx, size=deficit, replace=True)
        values = matrix.values[extra]
        keys = [f"{matrix.keys[i]}(dup{n})" for n, i in enumerate(extra)]
        labels = np.full(deficit, minority, dtype=np.int8)
        return matrix.append_rows(values, keys, labels)
    target = int(round(len(min_idx) / plan.target_ratio))
    if target >= len(maj_idx):
        return matrix
    keep_maj = rng.choice(maj_idx, size=target, replace=False)
    keep = np.sort(np.concatenate([min_idx, keep_maj]))
    return matrix.take_rows(keep)


def _distance_space(matrix: FeatureMatrix) -> np.ndarray:
    """Z-scored numeric columns; falls back to all columns if none are numeric."""
    idx = matrix.numeric_indices() or list(range(matrix.n_cols))
    space = matrix.values[:, idx].astype(np.float64)
    mean = space.mean(axis=0)
    std = space.std(axis=0)
    std[std == 0] = 1.0
    return (space - mean) / std


def _k_nearest(space: np.ndarray, query: int, candidates: np.ndarray, k: int) -> np.ndarray:
    """Indices (into candidates) of the k nearest rows, ties broken by index."""
    deltas = space[candidates] - space[query]
    dist = np.sqrt(np.sum(deltas * deltas, axis=1))
    order = np.lexsort((candidates, dist))
    return candidates[order[:k]]


def _round_non_numeric(matrix: FeatureMatrix, row: np.ndarray) -> np.ndarray:
    """Round interpolated indicator/categorical dimensions to valid values."""
    for j, meta in enumerate(matrix.columns):
        if meta.kind == "multi_hot":
            row[j] = 1.0 if row[j] >= 0.5 else 0.0
        elif meta.kind == "encoded_categorical":
            max_code = max(meta.category_map.values()) if meta.category_map else 0
            row[j] = min(max(float(np.floor(row[j] + 0.5)), 0.0), float(max_code))
    return row


def interpolate_rows(
    matrix: FeatureMatrix, x_i: np.ndarray, x_nn: np.ndarray, lam: float
) -> np.ndarray:
    """One synthetic row x_i + lam * (x_nn - x_i) with non-numeric rounding."""
    row = x_i + lam * (x_nn - x_i)
    return _round_non_numeric(matrix, row)


def smote(matrix: FeatureMatrix, plan: ResamplePlan) -> FeatureMatrix:
    """Synthesize minority rows by interpolating toward minority neighbors."""
    minority, _, min_idx, maj_idx = _class_split(matrix)
    if len(min_idx) <= plan.k_smote:
        raise ResampleError(
            f"minority count {len(min_idx)} must exceed k_smote={plan.k_smote}; "
            "use a smaller k"
        )
    target = int(round(plan.target_ratio * len(maj_idx)))
    n_new = target - len(min_idx)
    if n_new <= 0:
        return matrix
    space = _distance_space(matrix)
    # one RNG stream per synthetic row, so generation order cannot matter
    streams = np.random.SeedSequence(plan.seed).spawn(n_new)
    neighbor_cache: dict[int, np.ndarray] = {}
    new_values = np.empty((n_new, matrix.n_cols), dtype=np.float64)
    for s in range(n_new):
        rng = np.random.default_rng(streams[s])
        i = int(rng.choice(min_idx))
        neighbors = neighbor_cache.get(i)
        if neighbors is None:
            others = min_idx[min_idx != i]
            neighbors = _k_nearest(space, i, others, plan.k_smote)
            neighbor_cache[i] = neighbors
        nn = int(rng.choice(neighbors))
        lam = float(rng.uniform(0.0, 1.0))
        new_values[s] = interpolate_rows(matrix, matrix.values[i], matrix.values[nn], lam)
    keys = [f"synthetic-{s}" for s in range(n_new)]
    labels = np.full(n_new, minority, dtype=np.int8)
    return matrix.append_rows(new_values, keys, labels)


def enn(matrix: FeatureMatrix, plan: ResamplePlan) -> FeatureMatrix:
    """Wilson editing, single pass: remove rows whose k nearest neighbors
    majority-vote a different class.

    The default mode only edits majority-class rows; enn_mode="all" edits any
    row (classic Wilson editing).
    """
    if matrix.labels is None:
        raise ResampleError("resampling requires labels")
    n = matrix.n_rows
    if n <= plan.k_enn:
        raise ResampleError(f"need more than k_enn={plan.k_enn} rows, got {n}")
    _, majority, _, _ = _class_split(matrix)
    space = _distance_space(matrix)
    labels = matrix.labels
    everyone = np.arange(n)
    keep = np.ones(n, dtype=bool)
    for i in range(n):
        if plan.enn_mode == "majority_only" and labels[i] != majority:
            continue
        others = everyone[everyone != i]
        neighbors = _k_nearest(space, i, others, plan.k_enn)
        disagree = int(np.sum(labels[neighbors] != labels[i]))
        if disagree > plan.k_enn - disagree:
            keep[i] = False
    return matrix.take_rows(np.flatnonzero(keep))


def smote_enn(matrix: FeatureMatrix, plan: ResamplePlan) -> FeatureMatrix:
    """SMOTE followed by Wilson editing, sharing the plan's seed."""
    return enn(smote(matrix, plan), plan)


def apply_plan(matrix: FeatureMatrix, plan: ResamplePlan) -> FeatureMatrix:
    if plan.strategy == "none":
        return matrix
    if plan.strategy in ("oversample", "undersample"):
        return random_resample(matrix, plan)
    if plan.strategy == "smote":
        return smote(matrix, plan)
    return smote_enn(matrix, plan)
