import io

import numpy as np
import pytest

from core.cohort import preprocess_cohort
from core.errors import CohortFormatError, StaleArtifactError
from core.file_handler import FileHandler


def parse(triplets, static="episode_id\n", **kwargs):
    return FileHandler.parse_cohort(io.StringIO(triplets), io.StringIO(static), **kwargs)


class TestParseErrors:
    def test_bad_header(self):
        with pytest.raises(CohortFormatError) as error:
            parse("id,time,feature,value\n")
        assert error.value.line == 1

    def test_unparseable_value_reports_line(self):
        text = "episode_id,time_hours,feature,value\ne1,0.5,hr,80\ne1,1.5,hr,abc\n"
        with pytest.raises(CohortFormatError) as error:
            parse(text)
        assert error.value.line == 3

    def test_blank_lines_keep_line_numbers(self):
        text = "episode_id,time_hours,feature,value\n\ne1,0.5,hr,80\n\ne1,1.5,hr,abc\n"
        with pytest.raises(CohortFormatError) as error:
            parse(text)
        assert error.value.line == 5

    def test_blank_static_line_keeps_line_number(self):
        with pytest.raises(CohortFormatError) as error:
            parse("episode_id,time_hours,feature,value\n", "episode_id,age\ne1,1\n\ne1,2\n")
        assert error.value.line == 4

    def test_negative_time(self):
        with pytest.raises(CohortFormatError, match="time_hours"):
            parse("episode_id,time_hours,feature,value\ne1,-1,hr,80\n")

    def test_non_finite_value(self):
        with pytest.raises(CohortFormatError):
            parse("episode_id,time_hours,feature,value\ne1,1,hr,nan\n")

    def test_duplicate_static_row(self):
        with pytest.raises(CohortFormatError, match="e1"):
            parse("episode_id,time_hours,feature,value\n", "episode_id,age\ne1,1\ne1,2\n")

    def test_undeclared_static_column(self, files):
        schema = FileHandler.read_schema(files / "schema.json")
        with pytest.raises(CohortFormatError, match="weight"):
            parse("episode_id,time_hours,feature,value\n", "episode_id,weight\ne1,70\n", schema=schema)

    def test_feature_outside_vocab(self):
        with pytest.raises(CohortFormatError, match="sbp"):
            parse("episode_id,time_hours,feature,value\ne1,1,sbp,80\n", feature_vocab=["hr"])


class TestParse:
    def test_episode_only_in_triplets(self):
        cohort = parse("episode_id,time_hours,feature,value\ne2,1,hr,80\n",
                       "episode_id,age\ne1,50\n")
        assert cohort.episode_ids == ["e1", "e2"]
        assert np.isnan(cohort.episodes[1].static_vector[0])

    def test_blank_lines_are_ignored(self):
        cohort = parse("episode_id,time_hours,feature,value\ne1,1,hr,80\n\ne1,2,hr,82\n\n")
        assert [t.value for t in cohort.episodes[0].triplets] == [80.0, 82.0]

    def test_static_columns_default_to_numeric(self):
        cohort = parse("episode_id,time_hours,feature,value\n", "episode_id,age,bmi\ne1,50,\n")
        assert cohort.static_columns == ["age", "bmi"]
        assert np.isnan(cohort.static_matrix()[0, 1])


class TestProcessedRoundTrip:
    def test_write_then_load_preserves_values(self, raw_cohort, ranges, tmp_path):
        processed = preprocess_cohort(raw_cohort, ranges)
        FileHandler.write_processed_cohort(processed, tmp_path, extra={"cohort_hash": "abc"})
        loaded, description = FileHandler.load_processed_cohort(tmp_path)

        assert description["cohort_hash"] == "abc"
        assert loaded.feature_vocab == processed.feature_vocab
        assert loaded.normalization_stats == processed.normalization_stats
        assert loaded.static_stats == processed.static_stats
        assert loaded.clip_report == processed.clip_report
        np.testing.assert_array_equal(loaded.impute_reference, processed.impute_reference)
        for before, after in zip(processed.episodes, loaded.episodes):
            assert before.episode_id == after.episode_id
            assert before.triplets == after.triplets
            np.testing.assert_array_equal(before.static_vector, after.static_vector)
            assert before.metadata == after.metadata

    def test_missing_categorical_written_empty(self, raw_cohort, tmp_path):
        paths = FileHandler.write_cohort(raw_cohort, tmp_path)
        lines = paths["static"].read_text().splitlines()
        assert lines[0] == "episode_id,age,sex"
        assert lines[2] == "e2,,female"
        assert lines[3] == "e3,60.0,"


class TestWeights:
    def test_round_trip(self, tmp_path):
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([0.1, -0.2])}
        FileHandler.save_weights(tmp_path / "net", tensors, {"config_hash": "h1", "seed": 3})
        loaded, manifest = FileHandler.load_weights(tmp_path / "net", expect={"config_hash": "h1"})
        assert manifest["seed"] == 3
        for name, array in tensors.items():
            np.testing.assert_array_equal(loaded[name], array)

    def test_stale_manifest_rejected(self, tmp_path):
        FileHandler.save_weights(tmp_path / "net", {"a": np.zeros(2)}, {"vocab_hash": "old"})
        with pytest.raises(StaleArtifactError, match="vocab_hash"):
            FileHandler.load_weights(tmp_path / "net", expect={"vocab_hash": "new"})

    def test_blob_is_little_endian_float64(self, tmp_path):
        _, blob = FileHandler.save_weights(tmp_path / "net", {"a": np.array([1.0, 2.0])}, {})
        assert blob.read_bytes() == np.array([1.0, 2.0], dtype="<f8").tobytes()


class TestLabels:
    def test_round_trip(self, tmp_path):
        path = FileHandler.write_labels(tmp_path / "labels.csv", ["e1", "e2"], np.array([1, 0]))
        assert FileHandler.read_labels(path) == {"e1": 1, "e2": 0}

    def test_bad_header(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("id,label\ne1,0\n")
        with pytest.raises(CohortFormatError):
            FileHandler.read_labels(path)
