"""Deterministic K-means (seeded k-means++ init, Lloyd iterations) with
Davies-Bouldin model selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class ClusteringError(Exception):
    pass


class DimensionMismatch(ClusteringError):
    pass


class KOutOfRange(ClusteringError):
    pass


class SingletonClustering(ClusteringError):
    """Davies-Bouldin is undefined for fewer than two clusters."""


class CoincidentCentroids(ClusteringError):
    """Two centroids coincide, making their separation term undefined."""


@dataclass(frozen=True)
class ClusteringConfig:
    k_candidates: tuple[int, ...] | None = None  # None -> default range per instance
    rng_seed: int = 42
    max_iterations: int = 300
    convergence_tolerance: float = 1e-4

    def __post_init__(self):
        if self.k_candidates is not None:
            candidates = tuple(sorted(set(int(k) for k in self.k_candidates)))
            if not candidates or candidates[0] < 2:
                raise ValueError("k candidates must all be >= 2")
            object.__setattr__(self, "k_candidates", candidates)
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.convergence_tolerance <= 0:
            raise ValueError("convergence_tolerance must be positive")


@dataclass(frozen=True)
class ClusterSolution:
    k: int
    assignments: tuple[int, ...]
    centroids: tuple[tuple[float, ...], ...]
    db_score: float | None = None  # filled in by select_k

    def __post_init__(self):
        counts = [0] * self.k
        for a in self.assignments:
            if not 0 <= a < self.k:
                raise ValueError(f"assignment {a} out of range for k={self.k}")
            counts[a] += 1
        if any(c == 0 for c in counts):
            raise ValueError("every cluster must be nonempty")
        if self.db_score is not None and not (math.isfinite(self.db_score) and self.db_score >= 0):
            raise ValueError("db_score must be finite and >= 0")

    def members(self, cluster: int) -> list[int]:
        return [i for i, a in enumerate(self.assignments) if a == cluster]


def default_k_candidates(n_points: int) -> tuple[int, ...]:
    """Default candidate range 2 .. min(n-1, ceil(n/2), 20).

    Coarsening is supposed to merge similar items, so k close to n defeats the
    purpose; the cap also bounds the number of summarization calls downstream.
    """
    hi = min(n_points - 1, math.ceil(n_points / 2), 20)
    return tuple(range(2, hi + 1))


def _as_matrix(points: Sequence) -> np.ndarray:
    try:
        matrix = np.asarray(points, dtype=float)
    except ValueError as exc:
        raise DimensionMismatch(f"points must form a rectangular 2-D array: {exc}") from exc
    if matrix.ndim != 2:
        raise DimensionMismatch("points must form a rectangular 2-D array")
    return matrix


def _nearest(matrix: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin breaks distance ties toward the lower cluster index
    d2 = ((matrix[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def _repair_empty(matrix: np.ndarray, centroids: np.ndarray,
                  assignments: np.ndarray) -> np.ndarray:
    """Reseed each empty cluster with the farthest point whose own cluster
    keeps at least one member. Deterministic: ties go to the lowest index."""
    k = len(centroids)
    assignments = assignments.copy()
    for cluster in range(k):
        if (assignments == cluster).any():
            continue
        counts = np.bincount(assignments, minlength=k)
        dist = np.linalg.norm(matrix - centroids[assignments], axis=1)
        movable = counts[assignments] > 1
        if not movable.any():
            continue
        dist = np.where(movable, dist, -np.inf)
        assignments[int(dist.argmax())] = cluster
    return assignments


def _kmeanspp_init(matrix: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(matrix)
    chosen = [int(rng.integers(n))]
    for _ in range(1, k):
        d2 = ((matrix[:, None, :] - matrix[chosen][None, :, :]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            chosen.append(int(rng.integers(n)))
            continue
        cumulative = np.cumsum(d2 / total)
        chosen.append(int(np.searchsorted(cumulative, rng.random(), side="right")))
    return matrix[chosen].copy()


def kmeans(points: Sequence, k: int, cfg: ClusteringConfig | None = None) -> ClusterSolution:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Identical (points, k, cfg) always produce an identical solution. Empty
    clusters are repaired by reseeding with the farthest point.
    """
    cfg = cfg or ClusteringConfig()
    matrix = _as_matrix(points)
    n = len(matrix)
    if not 2 <= k <= n:
        raise KOutOfRange(f"k must satisfy 2 <= k <= {n}, got {k}")

    rng = np.random.default_rng(cfg.rng_seed)
    centroids = _kmeanspp_init(matrix, k, rng)
    assignments = _nearest(matrix, centroids)
    for _ in range(cfg.max_iterations):
        assignments = _nearest(matrix, centroids)
        assignments = _repair_empty(matrix, centroids, assignments)
        new_centroids = np.vstack(
            [matrix[assignments == c].mean(axis=0) for c in range(k)]
        )
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        if shift < cfg.convergence_tolerance:
            break
    # Final pass so assignments are consistent with the returned centroids.
    assignments = _nearest(matrix, centroids)
    assignments = _repair_empty(matrix, centroids, assignments)

    return ClusterSolution(
        k=k,
        assignments=tuple(int(a) for a in assignments),
        centroids=tuple(tuple(float(v) for v in c) for c in centroids),
    )


def davies_bouldin(points: Sequence, solution: ClusterSolution) -> float:
    """DB = (1/k) * sum_i max_{j != i} (S_i + S_j) / M_ij, with S_i the mean
    Euclidean distance of cluster-i members to centroid i and M_ij the
    distance between centroids i and j. Lower is better."""
    if solution.k < 2:
        raise SingletonClustering("Davies-Bouldin needs at least 2 clusters")
    matrix = _as_matrix(points)
    if len(matrix) != len(solution.assignments):
        raise DimensionMismatch("points and assignments disagree in length")
    centroids = np.asarray(solution.centroids, dtype=float)

    dispersion = []
    for cluster in range(solution.k):
        members = matrix[[a == cluster for a in solution.assignments]]
        dispersion.append(float(np.linalg.norm(members - centroids[cluster], axis=1).mean()))

    worst = []
    for i in range(solution.k):
        ratios = []
        for j in range(solution.k):
            if i == j:
                continue
            separation = float(np.linalg.norm(centroids[i] - centroids[j]))
            if separation == 0.0:
                raise CoincidentCentroids(f"centroids {i} and {j} coincide")
            ratios.append((dispersion[i] + dispersion[j]) / separation)
        worst.append(max(ratios))
    return float(sum(worst) / solution.k)


def select_k(points: Sequence, cfg: ClusteringConfig | None = None) -> ClusterSolution:
    """Run kmeans for every candidate k and keep the Davies-Bouldin minimizer.

    Ties go to the smaller k. Candidates whose clustering degenerates into
    coincident centroids (possible with heavily duplicated points) are skipped;
    it is an error only if no candidate survives.
    """
    cfg = cfg or ClusteringConfig()
    matrix = _as_matrix(points)
    n = len(matrix)
    if n < 3:
        raise KOutOfRange(f"model selection needs at least 3 points, got {n}")
    candidates = cfg.k_candidates or default_k_candidates(n)

    best: ClusterSolution | None = None
    for k in candidates:
        solution = kmeans(matrix, k, cfg)
        try:
            score = davies_bouldin(matrix, solution)
        except CoincidentCentroids:
            continue
        if best is None or score < best.db_score:
            best = replace(solution, db_score=score)
    if best is None:
        raise CoincidentCentroids("no candidate k produced separable centroids")
    return best
