"""Seeded K-means producing a codebook (centroids) and codes (assignments).

The solver works on the lexicographically sorted set of *distinct* input
vectors, each weighted by its multiplicity. Sorting makes initialization and
every floating-point reduction independent of input order, so permuting the
input permutes the codes and leaves everything else bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FLOAT, GroupedView, make_rng
from .errors import InvalidArgument

MAX_CLUSTERS = 65535
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class KMeansConfig:
    n_clusters: int
    iterations: int = 20
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if not 1 <= self.n_clusters <= MAX_CLUSTERS:
            raise InvalidArgument(
                f"n_clusters must be in [1, {MAX_CLUSTERS}], got {self.n_clusters}"
            )
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if self.restarts < 1:
            raise InvalidArgument("restarts must be >= 1")


@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray  # (n_effective, g) float32
    assignments: np.ndarray  # (k,) uint16
    objective: float
    n_effective: int
    history: tuple = field(default=(), compare=False)


def _vectors(vectors) -> np.ndarray:
    if isinstance(vectors, GroupedView):
        vectors = vectors.vectors
    v = np.asarray(vectors, dtype=FLOAT)
    if v.ndim == 1:
        v = v[:, None]
    if v.ndim != 2:
        raise InvalidArgument(f"vectors must be 2-D, got shape {v.shape}")
    return v


def _nearest(x: np.ndarray, centroids: np.ndarray):
    """Index of and squared distance to the nearest centroid (lowest index on ties)."""
    x64 = x.astype(np.float64)
    c64 = centroids.astype(np.float64)
    n = c64.shape[0]
    neg2ct = -2.0 * c64.T
    c_sq = np.einsum("ij,ij->i", c64, c64)
    labels = np.empty(x.shape[0], dtype=np.int64)
    step = max(1, _CHUNK_ELEMENTS // max(n, 1))
    for s in range(0, x.shape[0], step):
        # ||x||^2 is constant per row and cannot change the argmin
        d = x64[s : s + step] @ neg2ct
        d += c_sq
        labels[s : s + step] = np.argmin(d, axis=1)
    diff = x64 - c64[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def assign_step(vectors, centroids) -> np.ndarray:
    """E-step: nearest centroid by squared Euclidean distance."""
    x = _vectors(vectors)
    c = np.asarray(centroids, dtype=FLOAT)
    if c.ndim == 1:
        c = c[:, None]
    if c.shape[0] == 0:
        raise InvalidArgument("need at least one centroid")
    if c.shape[1] != x.shape[1]:
        raise InvalidArgument(
            f"centroid dim {c.shape[1]} does not match vector dim {x.shape[1]}"
        )
    labels, _ = _nearest(x, c)
    return labels


def _weighted_means(x64, labels, weights, n):
    counts = np.bincount(labels, weights=weights, minlength=n)
    sums = np.empty((n, x64.shape[1]), dtype=np.float64)
    for j in range(x64.shape[1]):
        sums[:, j] = np.bincount(labels, weights=weights * x64[:, j], minlength=n)
    return sums, counts


def _repair_empty(x, labels, weights, centroids, counts):
    """Move each empty centroid onto the farthest member of the largest cluster."""
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return centroids
    centroids = centroids.copy()
    diff = x.astype(np.float64) - centroids[labels].astype(np.float64)
    dist = np.einsum("ij,ij->i", diff, diff)
    counts = counts.copy()
    for j in empty:
        largest = int(np.argmax(counts))
        members = np.flatnonzero((labels == largest) & (dist > 0))
        if members.size == 0:
            members = np.flatnonzero(dist > 0)
            if members.size == 0:
                break
        pick = members[np.argmax(dist[members])]
        centroids[j] = x[pick]
        dist[pick] = 0.0
        counts[largest] -= weights[pick]
        counts[j] = weights[pick]
    return centroids


def update_step(vectors, assignments, n_clusters: int, weights=None, previous=None):
    """M-step: each non-empty cluster moves to the mean of its members.

    An empty cluster takes the member of the largest cluster farthest from
    its centroid. ``previous`` centroids (zeros when omitted) measure that
    distance.
    """
    x = _vectors(vectors)
    labels = np.asarray(assignments, dtype=np.int64)
    if labels.shape != (x.shape[0],):
        raise InvalidArgument("one assignment per vector is required")
    if labels.size and (labels.min() < 0 or labels.max() >= n_clusters):
        raise InvalidArgument("assignment out of range")
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    x64 = x.astype(np.float64)
    sums, counts = _weighted_means(x64, labels, w, n_clusters)
    if previous is None:
        previous = np.zeros((n_clusters, x.shape[1]), dtype=FLOAT)
    centroids = np.array(previous, dtype=FLOAT, copy=True)
    nz = counts > 0
    centroids[nz] = (sums[nz] / counts[nz, None]).astype(FLOAT)
    return _repair_empty(x, labels, w, centroids, counts)


def _kmeans_pp(x, weights, n, rng):
    m = x.shape[0]
    x64 = x.astype(np.float64)
    chosen = [int(rng.choice(m, p=weights / weights.sum()))]
    closest = np.einsum("ij,ij->i", x64 - x64[chosen[0]], x64 - x64[chosen[0]])
    for _ in range(1, n):
        p = weights * closest
        total = p.sum()
        if total <= 0:
            break
        idx = int(np.searchsorted(np.cumsum(p), rng.random() * total, side="right"))
        idx = min(idx, m - 1)
        while p[idx] <= 0:  # guard float edge at the cumsum boundary
            idx -= 1
        chosen.append(idx)
        d = np.einsum("ij,ij->i", x64 - x64[idx], x64 - x64[idx])
        np.minimum(closest, d, out=closest)
    return x[chosen].copy()


def _lloyd(x, weights, cfg: KMeansConfig, seed: int):
    rng = make_rng(seed)
    centroids = _kmeans_pp(x, weights, cfg.n_clusters, rng)
    n = centroids.shape[0]
    history = []
    for _ in range(cfg.iterations):
        labels, dist = _nearest(x, centroids)
        history.append(float(np.dot(weights, dist)))
        centroids = update_step(x, labels, n, weights=weights, previous=centroids)
    labels, dist = _nearest(x, centroids)
    objective = float(np.dot(weights, dist))
    history.append(objective)
    return centroids, labels, objective, history


def _compact(centroids, labels):
    used = np.unique(labels)
    remap = np.full(centroids.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return centroids[used], remap[labels]


def kmeans(vectors, cfg: KMeansConfig) -> KMeansResult:
    """Cluster ``vectors`` into at most ``cfg.n_clusters`` groups.

    Runs seeded k-means++ initialization followed by ``cfg.iterations`` E/M
    alternations and a final E-step; with ``restarts > 1`` the run with the
    lowest objective wins (earliest run on ties). Clusters left empty are
    dropped, so ``n_effective`` may be smaller than requested.
    """
    x = _vectors(vectors)
    if x.shape[0] == 0:
        raise InvalidArgument("kmeans needs at least one vector")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("vectors must be finite")
    uniq, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    weights = counts.astype(np.float64)

    if uniq.shape[0] <= cfg.n_clusters:
        codes = inverse.astype(np.uint16)
        return KMeansResult(uniq.astype(FLOAT), codes, 0.0, uniq.shape[0], (0.0,))

    seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.restarts, dtype=np.uint64)
    best = None
    for s in seeds:
        run = _lloyd(uniq, weights, cfg, int(s))
        if best is None or run[2] < best[2]:
            best = run
    centroids, labels, objective, history = best
    centroids, labels = _compact(centroids, labels)
    codes = labels[inverse].astype(np.uint16)
    return KMeansResult(
        centroids.astype(FLOAT), codes, objective, centroids.shape[0], tuple(history)
    )


def objective(vectors, centroids, assignments) -> float:
    """Sum of squared distances of each vector to its assigned centroid (float64)."""
    x = _vectors(vectors).astype(np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    diff = x - c[np.asarray(assignments, dtype=np.int64)]
    return float(np.einsum("ij,ij->", diff, diff))
