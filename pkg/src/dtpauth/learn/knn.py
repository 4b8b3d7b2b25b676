"""k-nearest-neighbour classification on standardized feature vectors."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, InputError


class KnnClassifier:
    """Euclidean kNN with per-dimension standardization from the training set.

    Votes are counted among the ``k`` nearest neighbours; ties go to the
    label whose tied neighbours have the smallest mean distance, then to
    the lowest label.
    """

    def __init__(self, k: int = 5):
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        self.k = k

    def fit(self, vectors, labels) -> "KnnClassifier":
        x = np.asarray(vectors, dtype=float)
        y = np.asarray(labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise InputError("training set must be a non-empty [n, d] array")
        if y.shape != (x.shape[0],):
            raise InputError("one label per training vector is required")
        if self.k > x.shape[0]:
            raise ConfigurationError("k exceeds the training set size")
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        self.x = (x - self.mean) / self.std
        self.y = y
        return self

    def predict(self, queries, chunk: int = 512) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        if q.shape[1] != self.x.shape[1]:
            raise InputError("query dimension does not match the training vectors")
        q = (q - self.mean) / self.std
        out = np.empty(q.shape[0], dtype=np.int64)
        sq = np.sum(self.x ** 2, axis=1)
        for s in range(0, q.shape[0], chunk):
            qc = q[s:s + chunk]
            d2 = np.maximum(sq[None, :] - 2 * qc @ self.x.T + np.sum(qc ** 2, axis=1)[:, None], 0.0)
            # stable sort keeps the result independent of argpartition internals
            nn = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
            for i, row in enumerate(nn):
                out[s + i] = _vote(self.y[row], np.sqrt(d2[i, row]))
        return out


def _vote(labels, dists) -> int:
    uniq, counts = np.unique(labels, return_counts=True)
    tied = uniq[counts == counts.max()]
    if tied.size == 1:
        return int(tied[0])
    means = np.array([dists[labels == c].mean() for c in tied])
    return int(tied[np.flatnonzero(means == means.min())[0]])


def knn_classify(train_vectors, train_labels, query, k: int = 5) -> int:
    """Label of a single query vector."""
    if len(train_vectors) == 0:
        raise InputError("empty training set")
    return int(KnnClassifier(k).fit(train_vectors, train_labels).predict(query)[0])
