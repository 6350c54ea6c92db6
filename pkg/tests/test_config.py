"""Tests for configuration."""

import json

import pytest

from psgel.domain.enums import ExperimentMode, GelKind
from psgel.domain.errors import ConfigurationError
from psgel.utils.config import ExperimentConfig


def test_defaults_are_valid():
    """Test that the default configuration validates."""
    config = ExperimentConfig().validate()

    assert config.experiment_mode is ExperimentMode.ESTIMATE
    assert config.to_sieve().j == 5
    assert config.to_fit_config(7).seed == 7


def test_unknown_key_is_rejected():
    """Test that unknown keys are configuration errors."""
    with pytest.raises(ConfigurationError, match="unknown"):
        ExperimentConfig.from_dict({"n": 100, "bogus": 1})


@pytest.mark.parametrize(
    "data",
    [{"n": "many"}, {"n": 2.5}, {"h0": 3}, {"levels": 0.95}, {"family": "gmm"}, {"reps": True}],
)
def test_wrong_types_are_rejected(data):
    """Test that mistyped values are configuration errors."""
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(data)


def test_numbers_are_coerced():
    """Test that integral floats and numeric strings are accepted."""
    config = ExperimentConfig.from_dict({"n": 300.0, "tau": "0.25", "levels": [0.9]})

    assert config.n == 300
    assert config.tau == 0.25
    assert config.levels == [0.9]


def test_explicit_missing_file(tmp_path):
    """Test that a named config file must exist."""
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_malformed_file(tmp_path):
    """Test that unreadable JSON is a configuration error."""
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")

    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(path)


def test_save_and_load(tmp_path):
    """Test saving and reloading a configuration."""
    path = tmp_path / "sub" / "config.json"
    config = ExperimentConfig(n=250, family="cue", levels=[0.8, 0.9], j_order=6)
    config.save(path)
    loaded = ExperimentConfig.load(path)

    assert loaded == config
    assert loaded.to_fit_config().family is GelKind.CUE
    assert json.loads(path.read_text(encoding="utf-8"))["n"] == 250


def test_hash_is_stable_and_ignores_execution_fields():
    """Test the config hash depends only on result-affecting fields."""
    base = ExperimentConfig()

    assert base.config_hash() == ExperimentConfig().config_hash()
    assert base.config_hash() == ExperimentConfig(workers=8, output_dir="elsewhere").config_hash()
    assert base.config_hash() != ExperimentConfig(n=501).config_hash()
    assert len(base.config_hash()) == 64


def test_overrides_skip_none():
    """Test that None overrides keep the current values."""
    config = ExperimentConfig(n=100).with_overrides({"n": None, "reps": 4})

    assert config.n == 100
    assert config.reps == 4


def test_invalid_values_are_rejected():
    """Test that out-of-range values are configuration errors."""
    with pytest.raises(ConfigurationError):
        ExperimentConfig(tau=1.5).validate()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(levels=[1.2]).validate()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(mode="everything").validate()
    with pytest.raises(ConfigurationError):
        ExperimentConfig(bandwidth_multipliers=[1.0, 2.0]).validate()


def test_fit_config_workers_are_explicit():
    """Test that replications keep one worker and standalone fits take the configured count."""
    config = ExperimentConfig(workers=4)

    assert config.to_fit_config(3).workers == 1
    assert config.to_fit_config(3, workers=config.workers).workers == 4
