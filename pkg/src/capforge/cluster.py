"""Deterministic numeric kernels: cosine similarity, stable softmax, and
seeded Lloyd k-means with k-means++ initialization.

All tie-breaks resolve to the lowest index so repeated runs with the same
seed are bit-identical. The k-means here is intentionally hand-rolled:
the pipeline's contracts (lowest-index ties, farthest-point repair of
empty clusters, monotone inertia) are stricter than what library
implementations guarantee across versions.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ClusteringError, ValidationError
from .validation import as_float_matrix, as_float_vector


def l2_normalize(X: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale rows (or the single vector) to unit L2 norm."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("cannot normalize a zero vector")
    return X / norms


def cosine_sim(a, b) -> float:
    """Cosine similarity of two non-zero vectors, exactly symmetric."""
    a = as_float_vector(a, "a")
    b = as_float_vector(b, "b")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine_sim is undefined for a zero vector")
    return float(np.dot(a / na, b / nb))


def cosine_sim_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between the rows of A and of B."""
    A = l2_normalize(as_float_matrix(A, "A"))
    B = l2_normalize(as_float_matrix(B, "B"))
    return A @ B.T


def row_softmax(scores) -> np.ndarray:
    """Row-wise softmax with max-subtraction for numerical stability."""
    Z = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise ValidationError("softmax input contains NaN or Inf")
    squeeze = Z.ndim == 1
    Z = np.atleast_2d(Z)
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    P = E / E.sum(axis=1, keepdims=True)
    return P[0] if squeeze else P


@dataclass
class ClusterModel:
    """Result of one k-means run."""

    k: int
    centroids: np.ndarray      # (k, D)
    assignments: np.ndarray    # (N,) cluster ids
    inertia: float             # sum of squared distances to assigned centroid
    n_iter: int = 0

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == j)


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point (squared Euclidean, ties to lowest index)."""
    # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; argmin is stable on exact ties
    # because np.argmin returns the first occurrence.
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * (X @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    labels = np.argmin(d2, axis=1)
    dist2 = np.maximum(d2[np.arange(len(X)), labels], 0.0)
    return labels, dist2


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = X[first]
    closest = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            idx = int(rng.integers(0, n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = X[idx]
        closest = np.minimum(closest, np.sum((X - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300,
           tol: float = 1e-6) -> ClusterModel:
    """Seeded k-means++ plus Lloyd iterations.

    Deterministic for fixed (points, k, seed). Empty clusters are reseeded
    with the point currently farthest from its assigned centroid, then the
    assignment step is repeated so every point again maps to its nearest
    centroid. Inertia is checked to be non-increasing on every iteration.
    """
    X = as_float_matrix(points, "points")
    n = X.shape[0]
    if n == 0:
        raise ClusteringError("cannot cluster an empty point set")
    if k < 1 or k > n:
        raise ClusteringError(f"k={k} out of range for {n} points")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(X, k, rng)

    labels, dist2 = _assign(X, centroids)
    prev_inertia = float(dist2.sum())
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_centroids = centroids.copy()
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                new_centroids[j] = X[mask].mean(axis=0)
        labels, dist2 = _assign(X, new_centroids)

        empties = [j for j in range(k) if not np.any(labels == j)]
        if empties:
            for j in empties:
                far = int(np.argmax(dist2))
                new_centroids[j] = X[far]
                dist2[far] = 0.0  # cannot be picked twice
            labels, dist2 = _assign(X, new_centroids)

        inertia = float(dist2.sum())
        assert inertia <= prev_inertia + 1e-8, (
            f"k-means inertia increased: {prev_inertia} -> {inertia}"
        )
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        converged = shift < tol
        prev_inertia = inertia
        if converged:
            break

    return ClusterModel(k=k, centroids=centroids, assignments=labels,
                        inertia=prev_inertia, n_iter=n_iter)


class SeededKMeans(BaseEstimator):
    """sklearn-style front end over :func:`kmeans`.

    Parameters mirror the function; after ``fit`` the usual attributes
    (``cluster_centers_``, ``labels_``, ``inertia_``, ``n_iter_``) are set.
    """

    def __init__(self, n_clusters: int = 8, seed: int = 0,
                 max_iter: int = 300, tol: float = 1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        model = kmeans(X, self.n_clusters, seed=self.seed,
                       max_iter=self.max_iter, tol=self.tol)
        self.cluster_centers_ = model.centroids
        self.labels_ = model.assignments
        self.inertia_ = model.inertia
        self.n_iter_ = model.n_iter
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        labels, _ = _assign(as_float_matrix(X, "X"), self.cluster_centers_)
        return labels
