import math

import numpy as np
import pytest
from scipy.stats import chi2, rankdata

from core.cohort import CohortDataset, EpisodeRecord, ObservationTriplet, StaticColumn, preprocess_cohort
from core.errors import ConfigError, ShapeMismatchError
from core.stats import (characterize, chi2_upper_tail, hourly_mean_ci, kruskal_wallis, label_map,
                        pca_project, summarize_cohort)


def rank_oracle(groups):
    pooled = np.concatenate(groups)
    ranks = rankdata(pooled)
    n = len(pooled)
    h, start = 0.0, 0
    for g in groups:
        r = ranks[start:start + len(g)]
        h += r.sum() ** 2 / len(g)
        start += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3 * (n + 1)
    _, counts = np.unique(pooled, return_counts=True)
    return h / (1.0 - (counts ** 3 - counts).sum() / (n ** 3 - n))


class TestKruskalWallis:
    def test_textbook_case(self):
        h, p = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert h == pytest.approx(7.2, abs=1e-6)
        assert p == pytest.approx(0.0273237, abs=1e-6)

    def test_matches_rank_oracle_with_ties(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            groups = [rng.integers(0, 6, size=int(rng.integers(2, 8))).astype(float)
                      for _ in range(int(rng.integers(2, 5)))]
            if np.all(np.concatenate(groups) == groups[0][0]):
                continue
            h, _ = kruskal_wallis(groups)
            assert h == pytest.approx(rank_oracle(groups), abs=1e-10)

    def test_identical_values(self):
        assert kruskal_wallis([[2, 2], [2], [2, 2]]) == (0.0, 1.0)

    def test_null_calibration(self):
        rng = np.random.default_rng(0)
        flagged = sum(kruskal_wallis([rng.normal(size=15) for _ in range(3)])[1] < 0.05
                      for _ in range(1000))
        assert 0.03 <= flagged / 1000 <= 0.07

    @pytest.mark.parametrize("groups", [[[1, 2, 3]], [[1, 2], []], [[1], [2]]])
    def test_invalid_input(self, groups):
        with pytest.raises(ConfigError):
            kruskal_wallis(groups)

    def test_chi2_tail(self):
        assert chi2_upper_tail(3.0, 2) == pytest.approx(math.exp(-1.5), rel=1e-12)
        for df in (1, 3, 7):
            assert chi2_upper_tail(4.2, df) == pytest.approx(chi2.sf(4.2, df), rel=1e-10)
        assert chi2_upper_tail(0.0, 3) == 1.0


def hr_cohort():
    rows = {
        "a": [(0.5, 0, 1.0), (0.5, 0, 3.0)],
        "b": [(0.5, 0, 2.0)],
        "c": [(0.5, 0, 4.0), (2.5, 0, 5.0)],
        "d": [(0.5, 0, 10.0)],
    }
    episodes = [EpisodeRecord(eid, np.zeros(0), [ObservationTriplet(*t) for t in r])
                for eid, r in rows.items()]
    return CohortDataset(episodes, ["hr"], normalization_stats={"hr": (0.0, 1.0)})


class TestHourlyMeans:
    def test_mean_and_interval(self):
        stats = hourly_mean_ci(hr_cohort(), {"a": 0, "b": 0, "c": 0, "d": 1}, "hr", horizon=3)
        first = stats[0]
        assert (first.cluster, first.hour, first.n_obs) == (0, 0, 3)
        # 受试者 a 在同一小时内先取均值 2.0
        assert first.mean == pytest.approx(8.0 / 3)
        half = 1.96 * np.std([2.0, 2.0, 4.0], ddof=1) / math.sqrt(3)
        assert first.ci_low == pytest.approx(first.mean - half)
        assert first.ci_high == pytest.approx(first.mean + half)

    def test_sparse_hours(self):
        stats = hourly_mean_ci(hr_cohort(), [0, 0, 0, 1], "hr", horizon=3)
        by_key = {(s.cluster, s.hour): s for s in stats}
        assert by_key[(0, 1)].n_obs == 0 and by_key[(0, 1)].mean is None
        assert by_key[(0, 2)].mean == 5.0 and by_key[(0, 2)].ci_low is None
        assert by_key[(1, 0)].mean == 10.0
        assert len(stats) == 6

    def test_raw_units(self):
        cohort = hr_cohort()
        cohort.normalization_stats = {"hr": (100.0, 10.0)}
        stats = hourly_mean_ci(cohort, [0, 0, 0, 1], "hr", horizon=1)
        assert stats[1].mean == pytest.approx(200.0)
        stats = hourly_mean_ci(cohort, [0, 0, 0, 1], "hr", raw_units=False, horizon=1)
        assert stats[1].mean == pytest.approx(10.0)

    def test_unknown_feature(self):
        with pytest.raises(ConfigError):
            hourly_mean_ci(hr_cohort(), [0, 0, 0, 1], "sbp")


class TestLabelMap:
    def test_sequence_must_align(self):
        with pytest.raises(ShapeMismatchError):
            label_map(hr_cohort(), [0, 1])

    def test_mapping_must_cover(self):
        with pytest.raises(ConfigError):
            label_map(hr_cohort(), {"a": 0, "b": 1})


class TestPca:
    def test_points_on_a_line(self):
        t = np.linspace(-1.0, 1.0, 7)
        data = np.column_stack([t, 2.0 * t, np.zeros(7)])
        result = pca_project(data)
        assert result.explained_variance_ratio[0] == pytest.approx(1.0)
        np.testing.assert_allclose(np.abs(result.components[0]), [1 / math.sqrt(5), 2 / math.sqrt(5), 0],
                                   atol=1e-12)

    def test_sign_convention(self):
        data = np.random.default_rng(2).normal(size=(20, 4))
        for component in pca_project(data).components:
            assert component[np.argmax(np.abs(component))] > 0
        flipped = pca_project(-data)
        np.testing.assert_allclose(np.abs(flipped.coordinates), np.abs(pca_project(data).coordinates),
                                   atol=1e-10)

    def test_zero_variance(self):
        with pytest.raises(ConfigError):
            pca_project(np.ones((5, 3)))

    def test_too_narrow(self):
        with pytest.raises(ConfigError):
            pca_project(np.zeros((5, 1)))


class TestCharacterize:
    def test_sample_cohort_in_raw_units(self, raw_cohort, ranges):
        processed = preprocess_cohort(raw_cohort, ranges)
        report = characterize(processed, {"e1": 0, "e2": 1, "e3": 1})
        assert report.counts == [1, 2]
        rows = {(r[0], r[1]): r for r in report.static_rows}
        assert rows[(0, "age")][2] == pytest.approx(45.0)
        assert rows[(1, "sex=female")][2:] == [0.5, None, 1]
        assert report.tests["ts:hr"]["H"] is None
        assert report.outcomes["mortality"]["1"] == {"n": 2, "rate": 0.5}
        assert report.outcomes["icu_los_hours"]["0"]["mean"] == 48.0

    def test_planted_labels(self, small_cohort):
        planted = [e.metadata["phenotype"] for e in small_cohort.episodes]
        report = characterize(small_cohort, planted)
        assert report.planted_ari == pytest.approx(1.0)
        assert sum(report.counts) == len(small_cohort.episodes)
        assert sum(report.proportions) == pytest.approx(1.0)
        assert set(report.tests) == ({f"static:{c}" for c in small_cohort.static_columns}
                                     | {f"ts:{f}" for f in small_cohort.feature_vocab})
        assert {row[0] for row in report.test_records()} == {"static", "ts"}
        assert report.significant_features()
        assert len(report.temporal_records()) == 2 * 120 * small_cohort.n_features

    def test_static_and_series_sharing_a_name(self):
        episodes = [EpisodeRecord(f"e{i}", np.array([float(i)]), [ObservationTriplet(0.5, 0, float(-i))])
                    for i in range(6)]
        cohort = CohortDataset(episodes, ["hr"], [StaticColumn("hr")], ["hr"])
        report = characterize(cohort, [0, 0, 0, 1, 1, 1], raw_units=False)
        assert set(report.tests) == {"static:hr", "ts:hr"}
        assert report.tests["static:hr"]["H"] == pytest.approx(report.tests["ts:hr"]["H"])

    def test_cohort_summary(self, small_cohort):
        rows = summarize_cohort({"a": small_cohort, "b": small_cohort.subset(small_cohort.episode_ids[:4])})
        assert rows[0] == ["N", str(len(small_cohort.episodes)), "4"]
        by_name = {r[0]: r for r in rows}
        assert " ± " in by_name["s00"][1]
        assert by_name["sex=female"][1].endswith("%)")
