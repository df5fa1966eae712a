"""Shared fixtures: a 4-character charset, procedural fonts and tiny-profile configs."""

import os
import sys

import numpy as np
import pytest
import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.config import RUN_SLOW, ModelProfile, TrainConfig
from src.textgen import Charset, discover_font_sources, load_fonts


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set GLYPHPRIOR_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def charset():
    return Charset.default().subset(4)


@pytest.fixture(scope="session")
def fonts(charset):
    return load_fonts(discover_font_sources(2), charset)


@pytest.fixture(scope="session")
def tiny_profile():
    return ModelProfile.named("tiny")


@pytest.fixture
def tiny_config(tmp_path):
    def make(**overrides):
        values = dict(
            profile="tiny",
            charset_size=4,
            n_fonts=2,
            out_dir=str(tmp_path / "run"),
            batch_size=2,
            pretrain_batch_size=4,
            max_steps=2,
            checkpoint_every=0,
            validate_every=0,
            log_every=1,
            val_samples=2,
            prior_eval_samples=4,
            deterministic=True,
            device="cpu",
        )
        values.update(overrides)
        return TrainConfig(**values)

    return make
