"""
Tests for stage configuration files and validation.
"""

import pytest

from src.config import DegradationConfig, LossWeights, ModelProfile, TrainConfig, load_train_config
from src.errors import ConfigError


def test_defaults():
    config = TrainConfig()
    assert config.losses.per == 0.05
    assert config.prior_scales == [32, 64]
    assert config.model_profile.code_dim == 512


def test_file_with_nested_sections(tmp_path):
    path = tmp_path / "stage.env"
    path.write_text(
        "PROFILE=tiny\nSEED=7\nPRIOR_SCALES=64\nLOSSES__PER=0.1\nDEGRADATION__QUALITY_RANGE=40,60\n",
        encoding="utf-8",
    )
    config = load_train_config(str(path), {"max_steps": 3})
    assert config.profile == "tiny" and config.seed == 7
    assert config.prior_scales == [64]
    assert config.losses.per == 0.1
    assert config.degradation.quality_range == (40, 60)
    assert config.max_steps == 3


def test_overrides_win(tmp_path):
    path = tmp_path / "stage.env"
    path.write_text("SEED=7\n", encoding="utf-8")
    assert load_train_config(str(path), {"seed": 9}).seed == 9


@pytest.mark.parametrize(
    "values",
    [
        {"prior_scales": "16"},
        {"prior_scales": "32,32"},
        {"scale": "3"},
        {"profile": "huge"},
        {"unknown_key": "1"},
        {"losses": {"ctc": "-1"}},
    ],
)
def test_invalid_values_raise_config_error(values):
    with pytest.raises(ConfigError):
        load_train_config(None, values)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_train_config("/nonexistent/stage.env")


def test_loss_weights_must_be_finite():
    with pytest.raises(ValueError):
        LossWeights(adv=float("inf"))


def test_profiles():
    tiny = ModelProfile.named("tiny")
    assert tiny.code_dim < ModelProfile.named("desk").code_dim
    with pytest.raises(ConfigError):
        ModelProfile.named("unknown")


def test_config_hash_tracks_values():
    assert TrainConfig(seed=1).config_hash() == TrainConfig(seed=1).config_hash()
    assert TrainConfig(seed=1).config_hash() != TrainConfig(seed=2).config_hash()


def test_disabled_degradation():
    config = DegradationConfig.disabled()
    assert config.blur_prob == config.noise_prob == config.jpeg_prob == 0.0
