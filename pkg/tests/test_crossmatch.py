import itertools

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from core.crossmatch import (align_clusters, compare_phenotype_distributions, cross_count,
                             crossmatch_test, exact_matching, greedy_matching, min_weight_matching)
from core.errors import ConfigError, ShapeMismatchError


def all_perfect_matchings(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        for tail in all_perfect_matchings(rest[:i] + rest[i + 1:]):
            yield [(first, partner)] + tail


def cost(distances, pairs):
    return sum(distances[i, j] for i, j in pairs)


class TestMatching:
    def test_exact_is_minimal(self):
        rng = np.random.default_rng(6)
        for n in (2, 4, 6, 8):
            distances = cdist(*(2 * [rng.normal(size=(n, 2))]))
            best = min(cost(distances, m) for m in all_perfect_matchings(list(range(n))))
            assert cost(distances, exact_matching(distances)) == pytest.approx(best, rel=1e-12)

    def test_matchings_are_perfect(self):
        points = np.random.default_rng(1).normal(size=(20, 3))
        for pairs, n in ((greedy_matching(cdist(points, points)), 20),
                         (exact_matching(cdist(points[:10], points[:10])), 10)):
            flat = sorted(itertools.chain.from_iterable(pairs))
            assert flat == list(range(n))

    def test_limit_selects_solver(self):
        points = np.random.default_rng(2).normal(size=(16, 2))
        assert min_weight_matching(points[:14])[1] is True
        assert min_weight_matching(points)[1] is False

    def test_odd_count_rejected(self):
        with pytest.raises(ConfigError):
            min_weight_matching(np.zeros((3, 2)))

    def test_cross_count(self):
        assert cross_count([(0, 1), (2, 3)], np.array([0, 1, 1, 1])) == 1


class TestCrossMatchTest:
    def test_separated_groups_are_detected(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(20, 2))
        b = rng.normal(size=(20, 2)) + 10.0
        result = crossmatch_test(a, b, n_perm=999, seed=0)
        assert result.statistic == 0
        assert result.p_value <= 0.01

    def test_p_value_bounds(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            a, b = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
            assert 0.0 < crossmatch_test(a, b, n_perm=99, seed=trial).p_value <= 1.0
            conservative = crossmatch_test(a, b, n_perm=99, seed=trial, randomize_ties=False)
            assert 1.0 / 100 <= conservative.p_value <= 1.0
            assert len(conservative.null_samples) == 99

    def test_tie_break_only_lowers_p(self):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        randomized = crossmatch_test(a, b, n_perm=199, seed=2)
        conservative = crossmatch_test(a, b, n_perm=199, seed=2, randomize_ties=False)
        assert randomized.statistic == conservative.statistic
        assert randomized.p_value <= conservative.p_value

    def test_input_order_does_not_matter(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(6, 2)), rng.normal(size=(7, 2))
        first = crossmatch_test(a, b, n_perm=199, seed=9)
        second = crossmatch_test(a[::-1], b[rng.permutation(7)], n_perm=199, seed=9)
        assert first.statistic == second.statistic
        assert first.p_value == second.p_value
        assert first.dropped and (first.n_a, first.n_b) == (6, 6)

    @pytest.mark.parametrize("n_a, n_b", [(1, 2), (2, 1), (1, 4)])
    def test_odd_total_keeps_both_groups(self, n_a, n_b):
        rng = np.random.default_rng(n_a * 10 + n_b)
        for seed in range(40):
            result = crossmatch_test(rng.normal(size=(n_a, 2)), rng.normal(size=(n_b, 2)),
                                     n_perm=19, seed=seed)
            assert result.dropped
            assert min(result.n_a, result.n_b) == min(n_a, n_b)
            assert result.n_a + result.n_b == n_a + n_b - 1

    def test_same_distribution_rejection_rate(self):
        rng = np.random.default_rng(10)
        rejections = 0
        for trial in range(200):
            result = crossmatch_test(rng.normal(size=(20, 2)), rng.normal(size=(20, 2)),
                                     n_perm=199, seed=trial)
            rejections += result.p_value <= 0.05
        assert 0.02 <= rejections / 200 <= 0.10

    def test_empty_group(self):
        with pytest.raises(ConfigError):
            crossmatch_test(np.zeros((0, 2)), np.zeros((3, 2)))

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            crossmatch_test(np.zeros((2, 2)), np.zeros((2, 3)))


def two_phenotypes(rng, n, spread=8.0):
    labels = np.repeat([0, 1], n // 2)
    return labels, labels[:, None] * spread + rng.normal(size=(n, 2))


class TestPhenotypeComparison:
    def test_alignment_recovers_permutation(self):
        centroids = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        mapping = align_clusters(centroids, centroids[[2, 0, 1]] + 0.1)
        assert mapping.tolist() == [2, 0, 1]

    def test_alignment_needs_equal_counts(self):
        with pytest.raises(ConfigError):
            align_clusters(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_cluster_numbers_are_aligned(self):
        rng = np.random.default_rng(12)
        labels_a, reps_a = two_phenotypes(rng, 24)
        labels_b, reps_b = two_phenotypes(rng, 24)
        comparison = compare_phenotype_distributions(labels_a, 1 - labels_b, reps_a, reps_b,
                                                     n_perm=199, seed=0)
        assert comparison.mapping == {0: 1, 1: 0}
        assert set(comparison.per_phenotype) == {0, 1}
        assert comparison.to_dict()["distribution"][0]["n_a"] == 12

    def test_cohort_split_in_half_is_reproduced(self):
        rng = np.random.default_rng(14)
        labels, reps = two_phenotypes(rng, 80)
        reproduced = 0
        for trial in range(10):
            half = rng.permutation(80)[:40]
            other = np.setdiff1d(np.arange(80), half)
            comparison = compare_phenotype_distributions(labels[half], labels[other], reps[half], reps[other],
                                                         n_perm=199, seed=trial)
            reproduced += comparison.verdict == "reproduced"
        assert reproduced >= 8

    def test_doubled_separation_is_detected(self):
        rng = np.random.default_rng(15)
        detected = 0
        for trial in range(10):
            labels_a, reps_a = two_phenotypes(rng, 40)
            labels_b, reps_b = two_phenotypes(rng, 40, spread=16.0)
            comparison = compare_phenotype_distributions(labels_a, labels_b, reps_a, reps_b,
                                                         n_perm=199, seed=trial)
            detected += min(r.p_value for r in comparison.per_phenotype.values()) <= 0.05
        assert detected >= 8

    def test_shifted_cohort_not_reproduced(self):
        rng = np.random.default_rng(13)
        labels = np.repeat([0, 1], 15)
        reps_a = np.where(labels[:, None] == 0, 0.0, 20.0) + rng.normal(size=(30, 2))
        reps_b = np.where(labels[:, None] == 0, 6.0, 26.0) + rng.normal(size=(30, 2))
        comparison = compare_phenotype_distributions(labels, labels, reps_a, reps_b,
                                                     n_perm=199, seed=0)
        assert comparison.verdict == "not reproduced"
        assert not comparison.reproduced
