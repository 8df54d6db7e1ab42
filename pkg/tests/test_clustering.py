import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pfgkit.clustering import (
    ClusteringConfig,
    ClusterSolution,
    CoincidentCentroids,
    DimensionMismatch,
    KOutOfRange,
    SingletonClustering,
    davies_bouldin,
    default_k_candidates,
    kmeans,
    select_k,
)

FOUR_POINTS = [[0.0], [0.1], [10.0], [10.1]]


def partition(assignments):
    groups = {}
    for i, c in enumerate(assignments):
        groups.setdefault(c, []).append(i)
    return frozenset(frozenset(v) for v in groups.values())


def db_reference(points, solution):
    """Straight-from-the-formula reimplementation used as the oracle."""
    k = solution.k
    spread = []
    for c in range(k):
        members = [p for p, a in zip(points, solution.assignments) if a == c]
        spread.append(
            sum(math.dist(m, solution.centroids[c]) for m in members) / len(members)
        )
    total = 0.0
    for i in range(k):
        worst = 0.0
        for j in range(k):
            if i != j:
                gap = math.dist(solution.centroids[i], solution.centroids[j])
                worst = max(worst, (spread[i] + spread[j]) / gap)
        total += worst
    return total / k


class TestKmeans:
    def test_well_separated_pairs(self):
        solution = kmeans(FOUR_POINTS, 2)
        assert partition(solution.assignments) == frozenset(
            {frozenset({0, 1}), frozenset({2, 3})}
        )

    def test_identical_points_repaired(self):
        solution = kmeans([[1.0, 2.0]] * 4, 2)
        counts = [solution.assignments.count(c) for c in range(2)]
        assert sorted(counts) == [1, 3]

    def test_matches_exhaustive_restart_oracle(self):
        # all C(8,3) single-point initializations, best Lloyd fixed point wins
        rng = np.random.default_rng(3)
        points = rng.normal(size=(8, 2))

        def lloyd(init):
            centroids = points[list(init)].copy()
            for _ in range(200):
                d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(2)
                assign = d2.argmin(1)
                updated = np.vstack(
                    [points[assign == c].mean(0) if (assign == c).any() else centroids[c]
                     for c in range(3)]
                )
                if np.allclose(updated, centroids, atol=1e-12):
                    break
                centroids = updated
            d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(2)
            assign = d2.argmin(1)
            return assign, float(d2[np.arange(8), assign].sum())

        best_inertia, best_partition = None, None
        for init in itertools.combinations(range(8), 3):
            assign, inertia = lloyd(init)
            if len(set(assign)) < 3:
                continue
            if best_inertia is None or inertia < best_inertia - 1e-12:
                best_inertia, best_partition = inertia, partition(assign)

        solution = kmeans(points, 3, ClusteringConfig(rng_seed=3))
        assert partition(solution.assignments) == best_partition

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(7)
        points = rng.normal(size=(20, 4))
        cfg = ClusteringConfig(rng_seed=11)
        assert kmeans(points, 4, cfg) == kmeans(points, 4, cfg)

    def test_k_out_of_range(self):
        with pytest.raises(KOutOfRange):
            kmeans(FOUR_POINTS, 1)
        with pytest.raises(KOutOfRange):
            kmeans(FOUR_POINTS, 5)

    def test_ragged_input(self):
        with pytest.raises(DimensionMismatch):
            kmeans([[1.0], [1.0, 2.0]], 2)


class TestDaviesBouldin:
    def test_hand_computed_value(self):
        solution = kmeans(FOUR_POINTS, 2)
        assert davies_bouldin(FOUR_POINTS, solution) == pytest.approx(0.01, abs=1e-12)

    def test_singleton_clusters_score_zero(self):
        solution = ClusterSolution(
            k=2, assignments=(0, 1), centroids=((0.0,), (5.0,))
        )
        assert davies_bouldin([[0.0], [5.0]], solution) == 0.0

    def test_coincident_centroids(self):
        solution = ClusterSolution(
            k=2, assignments=(0, 1), centroids=((1.0,), (1.0,))
        )
        with pytest.raises(CoincidentCentroids):
            davies_bouldin([[1.0], [1.0]], solution)

    def test_fewer_than_two_clusters(self):
        solution = ClusterSolution(k=1, assignments=(0, 0), centroids=((0.5,),))
        with pytest.raises(SingletonClustering):
            davies_bouldin([[0.0], [1.0]], solution)

    def test_matches_reference_on_random_instances(self):
        for case in range(20):
            rng = np.random.default_rng(200 + case)
            n = int(rng.integers(6, 30))
            points = rng.normal(size=(n, 3))
            k = int(rng.integers(2, 5))
            solution = kmeans(points, k, ClusteringConfig(rng_seed=case))
            expected = db_reference([tuple(p) for p in points], solution)
            got = davies_bouldin(points, solution)
            assert abs(got - expected) <= 1e-9 * max(1.0, abs(expected))


class TestSelectK:
    def test_default_candidates_pick_two_on_fixture(self):
        # default range for n=4 is min(3, ceil(4/2), 20) -> {2}
        assert default_k_candidates(4) == (2,)
        best = select_k(FOUR_POINTS, ClusteringConfig())
        assert best.k == 2
        assert best.db_score == pytest.approx(0.01, abs=1e-12)

    def test_explicit_candidates_follow_the_formula(self):
        # Splitting {10, 10.1} into singletons zeroes their dispersion, so the
        # formula prefers k=3 here: DB(3) ~= 0.005 < DB(2) = 0.01.
        best = select_k(FOUR_POINTS, ClusteringConfig(k_candidates=(2, 3)))
        assert best.k == 3
        assert best.db_score < 0.01

    def test_single_candidate(self):
        best = select_k(FOUR_POINTS, ClusteringConfig(k_candidates=(2,)))
        assert best.k == 2

    def test_tie_prefers_smaller_k(self):
        # mirrored singleton layout: k=2 and k=3 solutions are scored by the
        # same loop; equality keeps the first (smaller) k
        points = [[0.0], [4.0], [8.0], [12.0]]
        cfg = ClusteringConfig(k_candidates=(2,))
        first = select_k(points, cfg)
        again = select_k(points, ClusteringConfig(k_candidates=(2, 2)))
        assert first.k == again.k == 2

    def test_needs_three_points(self):
        with pytest.raises(KOutOfRange):
            select_k([[0.0], [1.0]], ClusteringConfig())

    def test_skips_degenerate_candidates(self):
        # duplicated points: k=3 forces coincident centroids, k=2 still works
        points = [[0.0], [0.0], [0.0], [5.0], [5.0], [5.0]]
        best = select_k(points, ClusteringConfig(k_candidates=(2, 3)))
        assert best.k == 2


# -- properties -----------------------------------------------------------------


@given(
    st.integers(min_value=0, max_value=10_000),
    st.integers(min_value=4, max_value=24),
    st.integers(min_value=2, max_value=5),
)
def test_solution_shape_properties(seed, n, k):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(n, 3))
    solution = kmeans(points, min(k, n - 1), ClusteringConfig(rng_seed=seed))
    assert len(solution.assignments) == n
    assert set(solution.assignments) == set(range(solution.k))
    assert len(solution.centroids) == solution.k


@given(st.integers(min_value=0, max_value=10_000))
def test_assignment_optimality(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 32))
    points = rng.normal(size=(n, 2))
    solution = kmeans(points, 3, ClusteringConfig(rng_seed=seed))
    centroids = np.asarray(solution.centroids)
    distances = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
    for i, a in enumerate(solution.assignments):
        assert distances[i, a] <= distances[i].min() + 1e-9
