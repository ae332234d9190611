"""Seeded Lloyd k-means used to summarise a task's document vectors."""

from __future__ import annotations

import numpy as np


def _plus_plus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = np.square(points - centers[0]).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[i])
        d2 = np.minimum(d2, np.square(points - points[i]).sum(axis=1))
    return np.array(centers)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (
        np.square(points).sum(axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.square(centers).sum(axis=1)[None, :]
    ).clip(min=0.0)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Return ``min(k, n)`` centers.

    With ``n <= k`` every point is its own cluster and the points are returned
    as-is. Otherwise k-means++ seeding and at most ``max_iter`` Lloyd steps,
    stopping early once inertia changes by less than ``tol`` relatively.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("kmeans needs a non-empty [n, d] array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(x) <= k:
        return x.copy()
    rng = np.random.default_rng(seed)
    centers = _plus_plus_init(x, k, rng)
    prev = np.inf
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        assign = d2.argmin(axis=1)
        nearest = d2[np.arange(len(x)), assign]
        inertia = float(nearest.sum())
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                far = int(nearest.argmax())
                centers[j] = x[far]
                nearest[far] = 0.0
        if np.isfinite(prev) and abs(prev - inertia) <= tol * max(prev, 1e-300):
            break
        prev = inertia
    return centers
