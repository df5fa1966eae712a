"""
Long desk-scale runs: prior sanity, end-to-end overfit and the prior-scale
ordering. Marked slow; set GLYPHPRIOR_RUN_SLOW=1 to run them.
"""

import json

import numpy as np
import pytest
import torch

from src.checkpoint import checkpoint_charset, checkpoint_config, load_checkpoint
from src.config import TrainConfig
from src.priorgan import StructureGenerator
from src.training import (
    build_sr_datasets,
    interpolation_consistency,
    load_prior,
    load_recognizer,
    load_sr_model,
    pretrain_prior,
    pretrain_recognizer,
    prior_recognition_accuracy,
    train_sr,
    validate,
)

pytestmark = pytest.mark.slow

DESK = dict(profile="desk", charset_size=16, n_fonts=4, seed=0, deterministic=True, device="cpu", checkpoint_every=0)


def _desk_prior(root, recognizer, scales):
    return pretrain_prior(
        TrainConfig(
            stage="pretrain-prior", out_dir=str(root / f"prior_{'_'.join(map(str, scales))}"), recognizer_ckpt=str(recognizer),
            prior_scales=scales, max_steps=2000, validate_every=0, pretrain_batch_size=32, **DESK,
        )
    )


@pytest.fixture(scope="module")
def desk_stages(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    recognizer = pretrain_recognizer(
        TrainConfig(stage="pretrain-recognizer", out_dir=str(root / "recog"), max_steps=2000, validate_every=0, **DESK)
    )
    return root, recognizer, _desk_prior(root, recognizer, [32, 64])


def test_prior_generates_recognizable_characters(desk_stages):
    _, recognizer_path, prior_path = desk_stages
    payload = load_checkpoint(str(prior_path), "pretrain-prior")
    config = checkpoint_config(payload)
    charset = checkpoint_charset(payload)
    generator = StructureGenerator(charset.M, config.model_profile, config.prior_scales)
    load_prior(generator, str(prior_path), charset)
    generator.eval()
    recognizer = load_recognizer(str(recognizer_path), charset, "cpu")

    assert prior_recognition_accuracy(generator, recognizer, n=500, seed=1) >= 0.9
    assert interpolation_consistency(generator, recognizer, pairs=20, steps=10, seed=2) >= 0.9


def test_end_to_end_overfit(tmp_path):
    config = TrainConfig(
        profile="tiny", charset_size=16, n_fonts=4, seed=0, deterministic=True, device="cpu",
        out_dir=str(tmp_path / "overfit"), scale=2, fixed_samples=32, val_samples=32, batch_size=8,
        max_steps=5000, checkpoint_every=0, validate_every=0, log_every=1,
    )
    path = train_sr(config)
    model, charset, _ = load_sr_model(str(path))
    train_set, _ = build_sr_datasets(config, charset)
    report = validate(model, train_set, charset)
    assert report.psnr_mean >= 30.0
    assert report.seq_accuracy == 1.0

    lines = (tmp_path / "overfit" / "train_sr_log.jsonl").read_text().splitlines()
    structure = [json.loads(line)["terms"].get("structure") for line in lines[-100:]]
    structure = [s for s in structure if s is not None]
    assert structure and np.mean(structure) <= 0.05


def test_both_prior_scales_beat_either_alone(desk_stages):
    root, recognizer, full_prior = desk_stages
    scores = {}
    for scales in ([32, 64], [32], [64]):
        prior_path = full_prior if len(scales) == 2 else _desk_prior(root, recognizer, scales)
        torch.manual_seed(0)
        config = TrainConfig(
            out_dir=str(root / f"sr_{'_'.join(map(str, scales))}"), prior_scales=scales, scale=2,
            batch_size=8, max_steps=3000, validate_every=0, val_samples=200, **DESK,
        )
        model, charset, _ = load_sr_model(str(train_sr(config, prior_checkpoint=str(prior_path))))
        _, held_out = build_sr_datasets(config, charset)
        scores[tuple(scales)] = validate(model, held_out, charset).psnr_mean

    assert scores[(32, 64)] >= scores[(32,)] - 0.05
    assert scores[(32, 64)] >= scores[(64,)] - 0.05
