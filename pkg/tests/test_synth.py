import numpy as np
import pytest

from core import synth
from core.config import SynthSpec
from core.errors import ConfigError


def spec(**overrides):
    values = dict(n_episodes=30, n_phenotypes=3, n_ts_features=2, n_static_features=1,
                  missingness_rate=0.3, separation=3.0, seed=1)
    values.update(overrides)
    return SynthSpec(**values)


def test_same_seed_is_identical():
    first, second = synth.generate(spec()), synth.generate(spec())
    assert first.episode_ids == second.episode_ids
    for a, b in zip(first.episodes, second.episodes):
        assert a.triplets == b.triplets
        np.testing.assert_array_equal(a.static_vector, b.static_vector)
        assert a.metadata == b.metadata


def test_different_seed_differs():
    first, second = synth.generate(spec(seed=1)), synth.generate(spec(seed=2))
    assert any(a.triplets != b.triplets for a, b in zip(first.episodes, second.episodes))


def test_phenotype_counts_follow_proportions():
    cohort = synth.generate(spec(n_episodes=10, phenotype_proportions=[0.5, 0.3, 0.2]))
    planted = [e.metadata["phenotype"] for e in cohort.episodes]
    assert np.bincount(planted).tolist() == [5, 3, 2]


def test_no_missingness_observes_every_hour():
    cohort = synth.generate(spec(n_episodes=3, missingness_rate=0.0))
    for episode in cohort.episodes:
        assert len(episode.triplets) == 2 * 120
        assert not np.isnan(episode.static_vector).any()


def test_missingness_rate_roughly_honoured():
    cohort = synth.generate(spec(n_episodes=20, missingness_rate=0.5))
    observed = sum(len(e.triplets) for e in cohort.episodes) / (20 * 2 * 120)
    assert observed == pytest.approx(0.5, abs=0.05)


def test_values_inside_clinical_ranges():
    s = spec()
    cohort = synth.generate(s)
    ranges = synth.clinical_ranges(s)
    for episode in cohort.episodes:
        for t in episode.triplets:
            low, high = ranges[cohort.feature_vocab[t.feature]]
            assert low <= t.value <= high
            assert 0.0 <= t.time < 120.0


def test_static_schema_has_one_hot_sex():
    cohort = synth.generate(spec())
    assert cohort.static_columns == ["s00", "sex=female", "sex=male"]
    np.testing.assert_array_equal(cohort.static_matrix()[:, 1:].sum(axis=1), 1.0)


def test_outcomes_present():
    cohort = synth.generate(spec())
    for episode in cohort.episodes:
        assert episode.metadata["mortality"] in (0, 1)
        assert episode.metadata["icu_los_hours"] > 0


def test_invalid_spec_rejected():
    with pytest.raises(ConfigError):
        spec(phenotype_proportions=[0.5, 0.5])
    with pytest.raises(ConfigError):
        spec(missingness_rate=1.0)
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"n_episodes": 5, "bogus": 1})


@pytest.mark.parametrize("raw", [{"n_episodes": "5"}, {"seed": 1.5}, {"phenotype_proportions": ["a"]}])
def test_wrong_value_types_are_config_errors(raw):
    with pytest.raises(ConfigError):
        SynthSpec.from_dict(dict(n_phenotypes=1, **raw))


def test_integer_accepted_for_float_field():
    assert SynthSpec.from_dict({"separation": 2}).separation == 2.0


def test_generator_seed_defaults_to_seed():
    first, second = synth.generate(spec(seed=4)), synth.generate(spec(seed=4, generator_seed=4))
    assert all(a.triplets == b.triplets for a, b in zip(first.episodes, second.episodes))
    third = synth.generate(spec(seed=4, generator_seed=5))
    assert any(a.triplets != c.triplets for a, c in zip(first.episodes, third.episodes))
