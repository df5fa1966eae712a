"""
Tests for the training plumbing (schedules, sampling, checkpoints) and short
runs of every stage on the tiny profile.
"""

import json

import pytest
import torch

from src.checkpoint import (
    check_charset,
    check_resume,
    checkpoint_charset,
    load_checkpoint,
    restore_models,
    save_checkpoint,
)
from src.config import TrainConfig
from src.dataset import SyntheticTextDataset
from src.errors import CheckpointMismatchError, ConfigError, TrainingDivergedError
from src.priorgan import StructureGenerator
from src.textgen import Charset
from src.training import (
    DivergenceDetector,
    PlateauRule,
    StepBatchSampler,
    TrainingLog,
    build_sr_model,
    load_prior,
    load_sr_model,
    pretrain_prior,
    pretrain_recognizer,
    step_rng,
    train_sr,
    validate,
)


# ---------------------------------------------------------------------------
# Schedules and sampling
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "history,expected",
    [
        ([], 1.0),
        ([1.0, 1.0, 1.0], 1.0),
        ([1.0, 1.0, 1.0, 1.0], 0.5),
        ([1.0] * 7, 0.25),
        ([1.0, 0.9, 0.8, 0.7, 0.6], 1.0),
        ([1.0, 0.995, 0.995, 0.995], 0.5),
        ([1.0, 1.0, 1.0, 0.5, 0.5, 0.5], 1.0),
    ],
)
def test_plateau_rule(history, expected):
    assert PlateauRule(patience=3, threshold=0.01, factor=0.5).lr_scale(history) == expected


def test_divergence_detector():
    detector = DivergenceDetector(factor=10.0, patience=3)
    detector.update(1.0)
    detector.update(11.0)
    detector.update(11.0)
    detector.update(5.0)
    detector.update(11.0)
    detector.update(11.0)
    restored = DivergenceDetector(factor=10.0, patience=3)
    restored.load_state_dict(detector.state_dict())
    with pytest.raises(TrainingDivergedError):
        restored.update(12.0)


def test_step_rng_is_keyed_by_step():
    assert step_rng(0, 1, 5).integers(0, 2**31) == step_rng(0, 1, 5).integers(0, 2**31)
    assert step_rng(0, 1, 5).integers(0, 2**31) != step_rng(0, 1, 6).integers(0, 2**31)


def test_batches_do_not_depend_on_start():
    full = list(StepBatchSampler(10, 3, seed=4, start=0, end=6))
    split = list(StepBatchSampler(10, 3, seed=4, start=0, end=2)) + list(StepBatchSampler(10, 3, seed=4, start=2, end=6))
    assert full == split
    assert len(full) == 6
    assert all(len(b) == 3 for b in full)
    with pytest.raises(ConfigError):
        StepBatchSampler(0, 3, seed=0, start=0, end=1)


def test_training_log_lines(tmp_path):
    log = TrainingLog(tmp_path / "log.jsonl")
    log.write(1, {"pixel": 0.5}, {"main": 1e-4})
    log.write(2, {"pixel": 0.4}, {"main": 1e-4}, {"psnr_mean": 20.0})
    entries = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text(encoding="utf-8").splitlines()]
    assert [e["step"] for e in entries] == [1, 2]
    assert entries[1]["validation"]["psnr_mean"] == 20.0


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, charset, tiny_config):
    config = tiny_config()
    model = torch.nn.Linear(3, 2)
    path = save_checkpoint(tmp_path / "ck.pt", "pretrain-recognizer", 5, config, charset, {"m": model}, extra={"k": 1})
    assert not (tmp_path / "ck.pt.tmp").exists()
    payload = load_checkpoint(str(path), "pretrain-recognizer")
    assert payload["step"] == 5 and payload["extra"] == {"k": 1}
    assert checkpoint_charset(payload).chars == charset.chars
    other = torch.nn.Linear(3, 2)
    restore_models(payload, {"m": other})
    assert torch.equal(other.weight, model.weight)


def test_checkpoint_mismatches(tmp_path, charset, tiny_config):
    config = tiny_config()
    path = save_checkpoint(tmp_path / "ck.pt", "pretrain-prior", 1, config, charset, {"m": torch.nn.Linear(3, 2)})
    payload = load_checkpoint(str(path))
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(str(path), "train-sr")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(str(tmp_path / "absent.pt"))
    with pytest.raises(CheckpointMismatchError):
        check_charset(payload, Charset.default().subset(5))
    with pytest.raises(CheckpointMismatchError):
        restore_models(payload, {"m": torch.nn.Linear(4, 2)})
    with pytest.raises(CheckpointMismatchError):
        restore_models(payload, {"other": torch.nn.Linear(3, 2)})
    check_resume(payload, config.model_copy(update={"max_steps": 50, "resume": str(path)}))
    with pytest.raises(CheckpointMismatchError):
        check_resume(payload, config.model_copy(update={"lr_main": 1e-3}))


def test_foreign_file_is_not_a_checkpoint(tmp_path):
    torch.save({"weights": 1}, tmp_path / "foreign.pt")
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(str(tmp_path / "foreign.pt"))


# ---------------------------------------------------------------------------
# Stage runs
# ---------------------------------------------------------------------------


SHORT_LINES = {"n_max": 2}


def test_validate_oracle_scores_hr(charset, fonts, tiny_config):
    config = tiny_config()
    model = build_sr_model(config, charset)
    dataset = SyntheticTextDataset(2, 0, charset, fonts, 4, render=config.render.model_copy(update=SHORT_LINES))
    report = validate(model, dataset, charset, oracle=True)
    assert report.num_samples == 2
    assert report.psnr_mean == 100.0
    assert report.ssim_mean == pytest.approx(1.0)
    assert 0.0 <= report.seq_accuracy <= 1.0


def test_prior_stage_needs_a_recognizer(tiny_config):
    with pytest.raises(ConfigError):
        pretrain_prior(tiny_config(stage="pretrain-prior"))


def test_pretraining_stages(tmp_path, tiny_config):
    recog_config = tiny_config(stage="pretrain-recognizer", out_dir=str(tmp_path / "recog"))
    recog_path = pretrain_recognizer(recog_config)
    payload = load_checkpoint(str(recog_path), "pretrain-recognizer")
    assert payload["step"] == 2
    assert (tmp_path / "recog" / "recognizer_log.jsonl").exists()

    prior_config = tiny_config(stage="pretrain-prior", out_dir=str(tmp_path / "prior"), recognizer_ckpt=str(recog_path), max_steps=1)
    prior_path = pretrain_prior(prior_config)
    payload = load_checkpoint(str(prior_path), "pretrain-prior")
    assert 0.0 <= payload["extra"]["prior_accuracy"] <= 1.0

    sr_config = tiny_config(out_dir=str(tmp_path / "sr"), fixed_samples=2, batch_size=1, max_steps=1, render=SHORT_LINES)
    sr_path = train_sr(sr_config, prior_checkpoint=str(prior_path))
    model, charset, config = load_sr_model(str(sr_path))
    assert charset.M == 4 and config.scale == 4
    trained_prior = load_checkpoint(str(prior_path))["models"]["generator"]["codebook.table"]
    assert model.generator.codebook.table.shape == trained_prior.shape


def _sr_weights(path):
    return load_checkpoint(str(path), "train-sr")["models"]["sr"]


def test_resumed_sr_run_matches_uninterrupted(tmp_path, tiny_config):
    common = dict(fixed_samples=2, batch_size=1, render=SHORT_LINES, validate_every=2, val_samples=1)
    straight = train_sr(tiny_config(out_dir=str(tmp_path / "a"), max_steps=2, **common))

    first = train_sr(tiny_config(out_dir=str(tmp_path / "b"), max_steps=1, **common))
    resumed = train_sr(tiny_config(out_dir=str(tmp_path / "b"), max_steps=2, resume=str(first), **common))

    a, b = _sr_weights(straight), _sr_weights(resumed)
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert load_checkpoint(str(resumed))["step"] == 2


def test_resume_rejects_changed_config(tmp_path, tiny_config):
    common = dict(fixed_samples=2, batch_size=1, render=SHORT_LINES)
    first = train_sr(tiny_config(out_dir=str(tmp_path / "c"), max_steps=1, **common))
    with pytest.raises(CheckpointMismatchError):
        train_sr(tiny_config(out_dir=str(tmp_path / "c"), max_steps=2, resume=str(first), lr_main=5e-4, **common))


def test_tiny_config_is_valid(tiny_config):
    assert isinstance(tiny_config(), TrainConfig)


def test_prior_checkpoint_must_match_the_scale_set(tmp_path, charset, tiny_config, tiny_profile):
    trained = StructureGenerator(charset.M, tiny_profile, (32, 64))
    path = save_checkpoint(
        tmp_path / "prior.pt", "pretrain-prior", 1, tiny_config(prior_scales=[32, 64]), charset, {"generator": trained}
    )
    with pytest.raises(CheckpointMismatchError):
        load_prior(StructureGenerator(charset.M, tiny_profile, (64,)), str(path), charset)

    same = StructureGenerator(charset.M, tiny_profile, (64, 32))
    load_prior(same, str(path), charset)
    assert torch.equal(same.codebook.table, trained.codebook.table)


@pytest.fixture
def recognizer_ckpt(tmp_path, tiny_config):
    return str(pretrain_recognizer(tiny_config(stage="pretrain-recognizer", out_dir=str(tmp_path / "recog"), max_steps=1)))


def _prior_weights(path):
    return load_checkpoint(str(path), "pretrain-prior")["models"]["generator"]


def test_zero_step_prior_run_keeps_initial_weights(tmp_path, tiny_config, recognizer_ckpt):
    common = dict(stage="pretrain-prior", recognizer_ckpt=recognizer_ckpt, prior_eval_samples=4)
    untouched = pretrain_prior(tiny_config(out_dir=str(tmp_path / "zero"), max_steps=0, **common))
    payload = load_checkpoint(str(untouched), "pretrain-prior")
    assert payload["step"] == 0
    assert all(not state["state"] for state in payload["optimizers"].values())

    stepped = pretrain_prior(tiny_config(out_dir=str(tmp_path / "one"), max_steps=1, **common))
    a, b = _prior_weights(untouched), _prior_weights(stepped)
    assert not torch.equal(a["codebook.table"], b["codebook.table"])


def test_same_seed_prior_runs_are_identical(tmp_path, tiny_config, recognizer_ckpt):
    common = dict(stage="pretrain-prior", recognizer_ckpt=recognizer_ckpt, max_steps=2, prior_eval_samples=4)
    a = _prior_weights(pretrain_prior(tiny_config(out_dir=str(tmp_path / "a"), **common)))
    b = _prior_weights(pretrain_prior(tiny_config(out_dir=str(tmp_path / "b"), **common)))
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
