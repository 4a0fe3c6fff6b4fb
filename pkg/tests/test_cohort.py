import numpy as np
import pytest

from core.cohort import (ClinicalRangeTable, CohortDataset, EpisodeRecord, ObservationTriplet,
                         StaticColumn, align_episode_start, apply_zscore, bin_hourly, clip_outliers,
                         drop_empty_episodes, fit_zscore, inverse_zscore, iterative_impute_static,
                         one_hot_static, preprocess_cohort)
from core.errors import ConfigError, ShapeMismatchError


def make_cohort(triplets_by_episode, vocab=("hr",)):
    episodes = [EpisodeRecord(eid, np.zeros(0), [ObservationTriplet(*t) for t in rows])
                for eid, rows in triplets_by_episode.items()]
    return CohortDataset(episodes=episodes, feature_vocab=list(vocab))


class TestParsedSample:
    def test_vocab_and_static_columns(self, raw_cohort):
        assert raw_cohort.feature_vocab == ["hr", "sbp"]
        assert raw_cohort.static_columns == ["age", "sex=female", "sex=male"]
        assert raw_cohort.episode_ids == ["e1", "e2", "e3"]

    def test_static_matrix_keeps_missing(self, raw_cohort):
        matrix = raw_cohort.static_matrix()
        np.testing.assert_array_equal(matrix[0], [45.0, 0.0, 1.0])
        assert np.isnan(matrix[1, 0])
        np.testing.assert_array_equal(matrix[1, 1:], [1.0, 0.0])
        np.testing.assert_array_equal(matrix[2], [60.0, 0.0, 0.0])

    def test_episode_without_triplets_is_kept(self, raw_cohort):
        assert [len(e.triplets) for e in raw_cohort.episodes] == [4, 3, 0]

    def test_metadata_parsed_as_numbers(self, raw_cohort):
        assert raw_cohort.episodes[1].metadata == {"mortality": 1.0, "icu_los_hours": 96.5}
        assert "icu_los_hours" not in raw_cohort.episodes[2].metadata


class TestClipOutliers:
    def test_removes_out_of_range_and_reports(self, raw_cohort, ranges):
        clipped = clip_outliers(raw_cohort, ranges)
        assert clipped.clip_report == {"hr": 0, "sbp": 1}
        assert [t.value for t in clipped.episodes[1].triplets] == [100.0, 110.0]

    def test_bounds_are_inclusive(self):
        cohort = make_cohort({"a": [(0.0, 0, 20.0), (1.0, 0, 250.0), (2.0, 0, 250.5)]})
        clipped = clip_outliers(cohort, ClinicalRangeTable({"hr": [20, 250]}))
        assert [t.value for t in clipped.episodes[0].triplets] == [20.0, 250.0]

    def test_missing_range_raises(self):
        cohort = make_cohort({"a": [(0.0, 1, 1.0)]}, vocab=("hr", "sbp"))
        with pytest.raises(ConfigError, match="sbp"):
            clip_outliers(cohort, ClinicalRangeTable({"hr": [0, 1]}))

    def test_invalid_range_rejected(self):
        with pytest.raises(ConfigError):
            ClinicalRangeTable({"hr": [10, 10]})


class TestBinning:
    def test_align_then_bin(self, raw_cohort):
        episode = align_episode_start(raw_cohort.episodes[0])
        binned = bin_hourly(episode)
        assert binned.triplets == [ObservationTriplet(0.5, 0, 85.0), ObservationTriplet(1.5, 1, 120.0)]

    def test_horizon_is_exclusive(self):
        episode = EpisodeRecord("a", np.zeros(0), [ObservationTriplet(119.99, 0, 1.0),
                                                   ObservationTriplet(120.0, 0, 2.0)])
        assert bin_hourly(episode).triplets == [ObservationTriplet(119.5, 0, 1.0)]

    def test_empty_hours_emit_nothing(self):
        episode = EpisodeRecord("a", np.zeros(0), [ObservationTriplet(0.1, 0, 1.0),
                                                   ObservationTriplet(5.9, 0, 3.0)])
        assert [t.time for t in bin_hourly(episode).triplets] == [0.5, 5.5]

    def test_align_without_triplets_is_noop(self):
        episode = EpisodeRecord("a", np.zeros(0))
        assert align_episode_start(episode) is episode


class TestZScore:
    def test_population_std(self):
        cohort = make_cohort({"a": [(0.5, 0, 1.0)], "b": [(0.5, 0, 3.0)]})
        assert fit_zscore(cohort) == {"hr": (2.0, 1.0)}

    def test_constant_feature_maps_to_zero(self):
        cohort = make_cohort({"a": [(0.5, 0, 7.0)], "b": [(0.5, 0, 7.0)]})
        normalized = apply_zscore(cohort, fit_zscore(cohort))
        assert [e.triplets[0].value for e in normalized.episodes] == [0.0, 0.0]

    def test_unfitted_feature_rejected(self):
        source = make_cohort({"a": [(0.5, 0, 1.0)]}, vocab=("hr", "sbp"))
        other = make_cohort({"b": [(0.5, 1, 1.0)]}, vocab=("hr", "sbp"))
        with pytest.raises(ConfigError, match="sbp"):
            apply_zscore(other, fit_zscore(source))

    def test_inverse(self):
        assert inverse_zscore(-1.0, (92.5, 7.5)) == 85.0


class TestStatic:
    def test_one_hot_rejects_unknown_category(self):
        schema = [StaticColumn("sex", "categorical", ("female", "male"))]
        with pytest.raises(ConfigError, match="other"):
            one_hot_static([{"sex": "other"}], schema)

    def test_categorical_needs_categories(self):
        with pytest.raises(ConfigError):
            StaticColumn("sex", "categorical")

    def test_impute_keeps_observed_values(self):
        matrix = np.array([[1.0, 2.0], [2.0, np.nan], [3.0, 6.0], [4.0, 8.0]])
        filled = iterative_impute_static(matrix)
        assert not np.isnan(filled).any()
        np.testing.assert_array_equal(filled[[0, 2, 3]], matrix[[0, 2, 3]])
        assert filled[1, 1] == pytest.approx(4.0, abs=1e-6)

    def test_single_column_falls_back_to_mean(self):
        filled = iterative_impute_static(np.array([[1.0], [np.nan], [3.0]]))
        np.testing.assert_array_equal(filled[:, 0], [1.0, 2.0, 3.0])

    def test_reference_imputer_is_reused(self):
        reference = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [4.0, np.nan]])
        target = np.array([[10.0, np.nan], [20.0, 5.0]])
        assert iterative_impute_static(target, reference=reference)[0, 1] == pytest.approx(20.0, abs=1e-6)
        assert abs(iterative_impute_static(target)[0, 1] - 20.0) > 1.0

    def test_reference_width_checked(self):
        with pytest.raises(ShapeMismatchError):
            iterative_impute_static(np.array([[1.0, np.nan]]), reference=np.zeros((3, 3)))

    def test_all_missing_column_raises(self):
        with pytest.raises(ConfigError):
            iterative_impute_static(np.array([[1.0, np.nan], [2.0, np.nan]]))


class TestPreprocess:
    def test_sample_values(self, raw_cohort, ranges):
        processed = preprocess_cohort(raw_cohort, ranges)
        assert processed.normalization_stats == {"hr": (92.5, 7.5), "sbp": (115.0, 5.0)}
        assert [t.value for t in processed.episodes[0].triplets] == [-1.0, 1.0]
        assert [t.value for t in processed.episodes[1].triplets] == [1.0, -1.0]
        assert processed.episodes[2].triplets == []

    def test_static_imputed_and_normalized(self, raw_cohort, ranges):
        processed = preprocess_cohort(raw_cohort, ranges)
        matrix = processed.static_matrix()
        assert np.isfinite(matrix).all()
        np.testing.assert_array_equal(matrix[:, 1:], [[0, 1], [1, 0], [0, 0]])
        assert inverse_zscore(matrix[0, 0], processed.static_stats["age"]) == pytest.approx(45.0)
        assert "sex=female" not in processed.static_stats

    def test_external_cohort_reuses_source_stats(self, raw_cohort, ranges):
        source = preprocess_cohort(raw_cohort, ranges)
        other = raw_cohort.subset(["e1", "e2"])
        external = preprocess_cohort(other, ranges, stats=source.normalization_stats,
                                     static_stats=source.static_stats)
        assert external.normalization_stats == source.normalization_stats
        assert [t.value for t in external.episodes[1].triplets] == [1.0, -1.0]

    def test_external_cohort_reuses_source_imputer(self, raw_cohort, ranges):
        source = preprocess_cohort(raw_cohort, ranges)
        external = preprocess_cohort(raw_cohort.subset(["e1", "e2"]), ranges,
                                     stats=source.normalization_stats, static_stats=source.static_stats,
                                     impute_reference=source.impute_reference)
        np.testing.assert_array_equal(external.impute_reference, raw_cohort.static_matrix())
        assert np.isfinite(external.static_matrix()).all()

    def test_input_is_not_modified(self, raw_cohort, ranges):
        before = [list(e.triplets) for e in raw_cohort.episodes]
        preprocess_cohort(raw_cohort, ranges)
        assert [e.triplets for e in raw_cohort.episodes] == before

    def test_drop_empty(self, raw_cohort):
        assert drop_empty_episodes(raw_cohort).episode_ids == ["e1", "e2"]
