"""Seeded Lloyd's K-means with k-means++ initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_ITER = 100
REL_TOL = 1e-6
_CHUNK_ELEMENTS = 1 << 22


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    # objective after every assignment step, in order
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centroids)


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact (x - c)^2 sums, chunked over points to bound memory."""
    n, d = points.shape
    k = len(centroids)
    out = np.empty((n, k), dtype=np.float64)
    step = max(1, _CHUNK_ELEMENTS // max(1, k * d))
    for start in range(0, n, step):
        diff = points[start:start + step, None, :] - centroids[None, :, :]
        out[start:start + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid labels (ties to the lowest index) and their squared distances."""
    d2 = squared_distances(np.asarray(points, dtype=np.float64), np.asarray(centroids, dtype=np.float64))
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(labels)), labels]


def _init_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[int(rng.integers(n))]]
    d2 = squared_distances(x, np.asarray(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, squared_distances(x, x[idx][None])[:, 0])
    return np.asarray(centers)


def _dedup(centroids: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, first, inverse = np.unique(centroids, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return centroids[np.sort(first)], remap[inverse.ravel()][labels]


def kmeans(points, k: int, seed: int = 0, max_iter: int = MAX_ITER, tol: float = REL_TOL) -> KMeansResult:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("kmeans needs a non-empty N x D array of points")
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(x)
    if n <= k:
        labels = np.arange(n)
        centroids, labels = _dedup(x.copy(), labels)
        return KMeansResult(centroids, labels, 0.0, [0.0])

    rng = np.random.default_rng(seed)
    centroids = _init_plusplus(x, k, rng)
    history: list[float] = []
    for it in range(max_iter):
        labels, dmin = assign(x, centroids)
        objective = float(dmin.sum())
        history.append(objective)
        if len(history) > 1 and history[-2] - objective <= tol * history[-2]:
            break
        if objective == 0.0:
            break
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new = centroids.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        # empty clusters restart at the points currently worst served
        far = np.argsort(-dmin, kind="stable")
        for j, idx in zip(np.flatnonzero(~nonempty), far):
            new[j] = x[idx]
        centroids = new
    else:
        labels, dmin = assign(x, centroids)
        history.append(float(dmin.sum()))

    centroids, labels = _dedup(centroids, labels)
    return KMeansResult(centroids, labels, history[-1], history)
