"""Clustering and regression metrics."""
from __future__ import annotations

from itertools import combinations

import numpy as np
from sklearn.metrics import normalized_mutual_info_score

from .errors import InvalidInputError


def nmi(labels_true, labels_pred) -> float:
    """Mutual information over the arithmetic mean of the two entropies.

    Returns 0 when either partition has a single class.
    """
    a = np.asarray(labels_true)
    b = np.asarray(labels_pred)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError("label vectors must be 1-d and of equal length")
    if len(a) == 0:
        raise InvalidInputError("empty label vectors")
    if len(np.unique(a)) < 2 or len(np.unique(b)) < 2:
        return 0.0
    return float(normalized_mutual_info_score(a, b, average_method="arithmetic"))


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.size == 0:
        raise InvalidInputError("prediction and truth must be non-empty and of equal shape")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InvalidInputError("cosine similarity of a zero vector")
    return float(u @ v / (nu * nv))


def avg_pairwise_similarity(vectors) -> float:
    """Mean cosine similarity over all unordered pairs."""
    vectors = [np.asarray(v, dtype=float) for v in vectors]
    if len(vectors) < 2:
        raise InvalidInputError("need at least two vectors")
    return float(np.mean([cosine_similarity(u, v) for u, v in combinations(vectors, 2)]))
