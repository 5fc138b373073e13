"""Seeded Lloyd's k-means with k-means++ initialization.

Written for reproducibility rather than speed: ties break toward the lowest
index, empty clusters are repaired deterministically, and the recorded
inertia sequence is non-increasing. The estimator follows the usual
fit/predict conventions with trailing-underscore fitted attributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.exceptions import NotFittedError

from .errors import DataContractError


@dataclass
class KMeansResult:
    """Final centers, hard assignments, and the per-iteration inertia trail."""

    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float]


def _validate_points(points: np.ndarray, n_clusters: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DataContractError(f"points must be 2-D (n, d), got shape {points.shape}")
    if not np.isfinite(points).all():
        raise DataContractError("points contain non-finite values")
    if n_clusters < 1:
        raise DataContractError(f"n_clusters must be >= 1, got {n_clusters}")
    distinct = np.unique(points, axis=0).shape[0]
    if distinct < n_clusters:
        raise DataContractError(
            f"need at least {n_clusters} distinct points, got {distinct}")
    return points


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) matrix of squared Euclidean distances, computed stably enough
    # for desk-sized problems via explicit differences.
    diffs = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diffs, diffs)


def _plusplus_init(points: np.ndarray, n_clusters: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each new center is drawn proportionally to squared
    distance, with a few candidates sampled and the one that shrinks the
    potential most kept."""
    n = points.shape[0]
    n_candidates = 2 + int(np.log(n_clusters + 1))
    centers = np.empty((n_clusters, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            # Remaining probability mass is zero everywhere; any point not yet
            # a center will do (unreachable under the distinct-points check).
            idx = int(np.argmin(d2))
            centers[c] = points[idx]
            continue
        candidates = rng.choice(n, size=n_candidates, p=d2 / total)
        best_idx, best_d2, best_pot = -1, d2, np.inf
        for idx in candidates:
            cand_d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
            pot = cand_d2.sum()
            if pot < best_pot:
                best_idx, best_d2, best_pot = int(idx), cand_d2, pot
        centers[c] = points[best_idx]
        d2 = best_d2
    return centers


def run_kmeans(points: np.ndarray, n_clusters: int, seed: int,
               max_iter: int = 100, tol: float = 1e-8) -> KMeansResult:
    """Cluster ``points`` into ``n_clusters`` groups.

    Deterministic for a fixed seed. Assignment ties go to the lowest-index
    center. An emptied cluster is re-seeded with the point farthest from its
    assigned center (the center snaps onto that point), which keeps the
    recorded inertia non-increasing across iterations.
    """
    points = _validate_points(points, n_clusters)
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = _plusplus_init(points, n_clusters, rng)

    history: list[float] = []
    labels = np.zeros(points.shape[0], dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _squared_distances(points, centers)
        labels = np.argmin(d2, axis=1)   # argmin takes the lowest index on ties
        point_d2 = d2[np.arange(points.shape[0]), labels]

        counts = np.bincount(labels, minlength=n_clusters)
        for c in np.flatnonzero(counts == 0):
            order = np.argsort(-point_d2, kind="stable")
            for far in order:
                if counts[labels[far]] > 1:
                    counts[labels[far]] -= 1
                    labels[far] = c
                    counts[c] = 1
                    centers[c] = points[far]
                    point_d2[far] = 0.0
                    break

        history.append(float(point_d2.sum()))

        new_centers = centers.copy()
        for c in range(n_clusters):
            members = points[labels == c]
            if members.shape[0]:
                new_centers[c] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break

    d2 = _squared_distances(points, centers)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(points.shape[0]), labels].sum())
    history.append(inertia)
    return KMeansResult(centers=centers, assignments=labels, inertia=inertia,
                        n_iter=n_iter, inertia_history=history)


class SeededKMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`run_kmeans`.

    Parameters mirror the function; fitted state lands in
    ``cluster_centers_``, ``labels_``, ``inertia_``, ``n_iter_`` and
    ``inertia_history_``.
    """

    def __init__(self, n_clusters: int = 8, random_state: int = 0,
                 max_iter: int = 100, tol: float = 1e-8):
        self.n_clusters = n_clusters
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        result = run_kmeans(X, self.n_clusters, self.random_state,
                            max_iter=self.max_iter, tol=self.tol)
        self.cluster_centers_ = result.centers
        self.labels_ = result.assignments
        self.inertia_ = result.inertia
        self.n_iter_ = result.n_iter
        self.inertia_history_ = result.inertia_history
        return self

    def predict(self, X):
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("SeededKMeans is not fitted; call fit first")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.cluster_centers_.shape[1]:
            raise DataContractError(
                f"predict expects (n, {self.cluster_centers_.shape[1]}) points, "
                f"got shape {X.shape}")
        return np.argmin(_squared_distances(X, self.cluster_centers_), axis=1)
