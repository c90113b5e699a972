"""K-means, K-Medoids (PAM) and silhouette-based selection of ``k``.

Clustering runs either on the attribution matrix (default) or on
standardised features. All randomness comes from
``substream(seed, "clustering", k, restart)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ArgumentError
from .rng import substream

INPUT_SPACES = ("shap", "standardized_features")


@dataclass(frozen=True)
class ClusteringResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    input_space: str = "shap"
    algorithm: str = "kmeans"
    medoids: np.ndarray | None = None
    n_iter: int = 0
    inertia_trace: tuple[float, ...] = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return len(self.centers)


@dataclass(frozen=True)
class KMeansParams:
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    seed: int = 0
    local_trials: int | None = None


def _check_k(X: np.ndarray, k: int) -> None:
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if k > X.shape[0]:
        raise ArgumentError(f"k={k} exceeds the number of points ({X.shape[0]})")


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator, local_trials: int | None = None) -> np.ndarray:
    """k-means++ seeding. Each step draws ``local_trials`` candidates by
    squared distance and keeps the one that lowers the potential most
    (``2 + floor(ln k)`` by default; 1 gives the plain scheme)."""
    n = len(X)
    trials = local_trials if local_trials is not None else 2 + int(math.log(k))
    centers = [int(rng.integers(n))]
    d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point sits on a chosen center; pick any unused index
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(remaining[rng.integers(remaining.size)])
            d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
        else:
            cand = rng.choice(n, size=trials, p=d2 / total)
            dc = np.minimum(cdist(X[cand], X, "sqeuclidean"), d2)
            best = int(np.argmin(dc.sum(axis=1)))
            nxt, d2 = int(cand[best]), dc[best]
        centers.append(nxt)
    return X[centers].copy()


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return cdist(X, C, "sqeuclidean")


def _lloyd(X, centers, max_iter, tol):
    k = len(centers)
    trace = []
    labels = np.zeros(len(X), dtype=np.int64)
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(X, centers)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(len(X)), labels]
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # move the point farthest from its center into the empty cluster
            far = int(np.argmax(point_d2))
            labels[far] = c
            point_d2[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        new = np.vstack([X[labels == c].mean(axis=0) for c in range(k)])
        trace.append(float(np.sum((X - new[labels]) ** 2)))
        shift = float(np.sum((new - centers) ** 2))
        centers = new
        if shift <= tol:
            break
    d2 = _sq_dist(X, centers)
    final = np.argmin(d2, axis=1)
    if np.all(np.bincount(final, minlength=k) > 0):
        labels = final
        # re-centre so that centers are the means of the reported labels
        centers = np.vstack([X[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(np.sum((X - centers[labels]) ** 2))
    trace.append(inertia)
    return labels, centers, inertia, it, trace


def kmeans(matrix, k: int, params: KMeansParams | None = None, input_space: str = "shap") -> ClusteringResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` runs by
    ``(inertia, restart index)``."""
    params = params or KMeansParams()
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    _check_k(X, k)
    best = None
    for r in range(params.restarts):
        rng = substream(params.seed, "clustering", k, r)
        labels, centers, inertia, it, trace = _lloyd(X, _kmeanspp(X, k, rng, params.local_trials), params.max_iter, params.tol)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia, it, trace)
    labels, centers, inertia, it, trace = best
    return ClusteringResult(labels, centers, inertia, input_space, "kmeans", None, it, tuple(trace))


def _pam_cost(D: np.ndarray, medoids: Sequence[int]) -> float:
    return float(D[:, list(medoids)].min(axis=1).sum())


def kmedoids(matrix, k: int, params: KMeansParams | None = None, input_space: str = "shap", max_swaps: int = 1000) -> ClusteringResult:
    """PAM: greedy BUILD, then best-improvement SWAP until no swap lowers
    the total Euclidean distance. Deterministic (ties go to lower indices);
    ``params`` is accepted for interface symmetry with :func:`kmeans`."""
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    _check_k(X, k)
    n = len(X)
    D = cdist(X, X)

    medoids = [int(np.argmin(D.sum(axis=0)))]
    nearest = D[:, medoids[0]].copy()
    for _ in range(1, k):
        gain = np.maximum(nearest[:, None] - D, 0.0).sum(axis=0)
        gain[medoids] = -np.inf
        m = int(np.argmax(gain))
        medoids.append(m)
        nearest = np.minimum(nearest, D[:, m])

    cost = _pam_cost(D, medoids)
    trace = [cost]
    for _ in range(max_swaps):
        best_cost, best_swap = cost, None
        for pos in range(k):
            others = medoids[:pos] + medoids[pos + 1 :]
            rest = D[:, others].min(axis=1) if others else np.full(n, np.inf)
            # total cost for every candidate replacement h of medoid ``pos``
            costs = np.minimum(D, rest[:, None]).sum(axis=0)
            costs[medoids] = np.inf
            h = int(np.argmin(costs))
            if costs[h] < best_cost - 1e-12:
                best_cost, best_swap = float(costs[h]), (pos, h)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
        cost = best_cost
        trace.append(cost)

    medoids_arr = np.array(medoids, dtype=np.int64)
    labels = np.argmin(D[:, medoids_arr], axis=1)
    return ClusteringResult(
        labels, X[medoids_arr].copy(), cost, input_space, "kmedoids", medoids_arr, len(trace) - 1, tuple(trace)
    )


def silhouette_samples(matrix, labels) -> np.ndarray:
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ArgumentError("silhouette needs at least 2 clusters")
    D = cdist(X, X)
    n = len(X)
    sums = np.column_stack([D[:, labels == c].sum(axis=1) for c in ids])
    sizes = np.array([(labels == c).sum() for c in ids])
    own = np.searchsorted(ids, labels)
    own_size = sizes[own]
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own_size > 1, s, 0.0)


def silhouette_score(matrix, labels) -> float:
    """Mean of ``(b - a) / max(a, b)``; singletons and ``a = b = 0`` score 0."""
    return float(np.mean(silhouette_samples(matrix, labels)))


@dataclass(frozen=True)
class KSelection:
    best_k: int
    scores: dict[int, float]
    results: dict[int, ClusteringResult] = field(compare=False, repr=False)


def cluster(matrix, k: int, algorithm: str = "kmeans", params: KMeansParams | None = None, input_space: str = "shap") -> ClusteringResult:
    if algorithm == "kmeans":
        return kmeans(matrix, k, params, input_space)
    if algorithm == "kmedoids":
        return kmedoids(matrix, k, params, input_space)
    raise ArgumentError(f"unknown clustering algorithm {algorithm!r}")


def select_k(
    matrix,
    k_range: Sequence[int],
    algorithm: str = "kmeans",
    params: KMeansParams | None = None,
    input_space: str = "shap",
) -> KSelection:
    """Cluster for every ``k`` and keep the best silhouette (ties -> smaller k)."""
    X = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ArgumentError("empty k range")
    if ks[0] < 2 or ks[-1] > len(X) - 1:
        raise ArgumentError(f"k range must lie within [2, {len(X) - 1}], got {ks[0]}..{ks[-1]}")
    scores, results = {}, {}
    for k in ks:
        res = cluster(X, k, algorithm, params, input_space)
        results[k] = res
        scores[k] = silhouette_score(X, res.labels)
    best = max(ks, key=lambda k: (scores[k], -k))
    return KSelection(best, scores, results)
