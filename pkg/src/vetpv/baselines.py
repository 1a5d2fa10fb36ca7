"""Baseline learners: full-batch gradient-descent logistic regression and a
distance-weighted K-nearest-neighbors classifier.

Logistic regression standardizes features internally with train-fitted
z-scores; descent stops at gradient norm 1e-6 or 10,000 iterations, warning
(but still returning the model) if the tolerance was not reached.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .boosting import sigmoid
from .matrix import FeatureMatrix
from .trees import FitError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogisticParams:
    step_size: float = 1.0
    l2: float = 1e-4
    tol: float = 1e-6
    max_iter: int = 10_000


def logistic_loss_grad(weights, bias, X, y, l2):
    """Mean regularized logloss and its gradient (bias unpenalized)."""
    z = X @ weights + bias
    p = sigmoid(z)
    eps = 1e-12
    loss = float(
        -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
        + 0.5 * l2 * float(weights @ weights)
    )
    residual = p - y
    grad_w = X.T @ residual / len(y) + l2 * weights
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


class LogisticModel:
    kind = "logistic"

    def __init__(self, weights, bias, mean, std, feature_names, converged=True):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.feature_names = list(feature_names)
        self.converged = converged

    def _standardize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != len(self.weights):
            raise FitError(f"expected {len(self.weights)} features, got {X.shape[1]}")
        return (X - self.mean) / self.std

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p1 = sigmoid(self._standardize(X) @ self.weights + self.bias)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int8)


def fit_logistic(matrix: FeatureMatrix, params: LogisticParams = LogisticParams()) -> LogisticModel:
    if matrix.labels is None:
        raise FitError("training matrix has no labels")
    X = matrix.values
    if np.isnan(X).any():
        raise FitError("training matrix contains NaN; impute before fitting")
    y = matrix.labels.astype(np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Xs = (X - mean) / std

    weights = np.zeros(X.shape[1])
    bias = 0.0
    grad_norm = np.inf
    for _ in range(params.max_iter):
        _, grad_w, grad_b = logistic_loss_grad(weights, bias, Xs, y, params.l2)
        grad_norm = float(np.sqrt(grad_w @ grad_w + grad_b * grad_b))
        if grad_norm <= params.tol:
            break
        weights -= params.step_size * grad_w
        bias -= params.step_size * grad_b
    converged = grad_norm <= params.tol
    if not converged:
        log.warning(
            "logistic regression did not converge: final gradient norm %.3e", grad_norm
        )
    return LogisticModel(weights, bias, mean, std, matrix.column_names(), converged)


@dataclass(frozen=True)
class KnnParams:
    k: int = 5


class KnnModel:
    """Stores the training rows; predicts by inverse-distance-weighted vote."""

    kind = "knn"

    def __init__(self, X, y, k, feature_names):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int8)
        self.k = int(k)
        self.feature_names = list(feature_names)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.X.shape[1]:
            raise FitError(f"expected {self.X.shape[1]} features, got {X.shape[1]}")
        out = np.empty((len(X), 2))
        for i, row in enumerate(X):
            deltas = self.X - row
            dist = np.sqrt(np.sum(deltas * deltas, axis=1))
            order = np.lexsort((np.arange(len(dist)), dist))[: self.k]
            votes = 1.0 / np.maximum(dist[order], 1e-12)
            w1 = float(votes[self.y[order] == 1].sum())
            total = float(votes.sum())
            out[i, 1] = w1 / total
            out[i, 0] = 1.0 - out[i, 1]
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(np.int8)


def fit_knn(matrix: FeatureMatrix, params: KnnParams = KnnParams()) -> KnnModel:
    if matrix.labels is None:
        raise FitError("training matrix has no labels")
    if params.k < 1:
        raise FitError(f"k must be >= 1, got {params.k}")
    return KnnModel(matrix.values, matrix.labels, params.k, matrix.column_names())
