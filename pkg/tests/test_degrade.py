"""
Tests for the degradation operators and record replay.
"""

import numpy as np
import pytest

from src.config import DegradationConfig
from src.degrade import (
    BlurOp,
    ColorJitterOp,
    DegradationRecord,
    JpegOp,
    NoiseOp,
    ResizeOp,
    apply_record,
    compress,
    degrade,
    gaussian_blur,
    gaussian_kernel,
    gaussian_noise,
    quantization_table,
    replay,
    resize,
    sample_record,
)
from src.errors import DegradationError


def _rgb(values):
    arr = np.asarray(values, dtype=np.float64)
    return np.repeat(arr[..., None], 3, axis=2)


def test_bilinear_shrink_averages():
    out = resize(_rgb([[0, 1], [2, 3]]), 1, 1, "bilinear")
    assert out.shape == (1, 1, 3)
    assert out[0, 0, 0] == pytest.approx(1.5)


def test_nearest_upscale_replicates():
    out = resize(_rgb([[0.2, 0.8]]), 1, 4, "nearest")
    assert np.allclose(out[0, :, 0], [0.2, 0.2, 0.8, 0.8])


def test_resize_rejects_empty_target():
    with pytest.raises(DegradationError):
        resize(_rgb([[0.0]]), 0, 1)


def test_gaussian_kernel_is_normalized_and_symmetric():
    k = gaussian_kernel(7, 1.2, 1.2)
    assert k.sum() == pytest.approx(1.0)
    assert np.allclose(k, k.T)
    assert np.allclose(k, k[::-1, ::-1])


@pytest.mark.parametrize("size,sigma", [(4, 1.0), (1, 1.0), (23, 1.0), (5, 0.0)])
def test_gaussian_kernel_validation(size, sigma):
    with pytest.raises(DegradationError):
        gaussian_kernel(size, sigma, sigma)


def test_zero_noise_is_identity():
    assert not gaussian_noise((4, 4, 3), 0.0, np.random.default_rng(0)).any()
    with pytest.raises(DegradationError):
        gaussian_noise((2, 2), -0.1, np.random.default_rng(0))


def test_quantization_table_scaling():
    table = quantization_table(np.full((8, 8), 16.0), 50)
    assert np.all(table == 16.0)
    assert np.all(quantization_table(np.full((8, 8), 16.0), 100) == 1.0)
    with pytest.raises(DegradationError):
        quantization_table(np.ones((8, 8)), 0)


def test_compress_is_idempotent_on_blockwise_flat_image():
    img = np.zeros((16, 16, 3))
    img[:8, :8] = 0.5
    img[:8, 8:] = 0.3
    img[8:, :8] = 0.7
    img[8:, 8:] = 0.45
    once = compress(img, 10)
    twice = compress(once, 10)
    assert np.abs(once - twice).max() <= 2 / 255 + 1e-12


def test_record_replay_is_exact():
    rng = np.random.default_rng(3)
    hr = rng.uniform(0, 1, size=(32, 64, 3)).astype(np.float32)
    record = sample_record(hr.shape, 4, DegradationConfig(), seed=123)
    restored = DegradationRecord.model_validate_json(record.model_dump_json())
    assert np.array_equal(replay(hr, record), replay(hr, restored))
    assert replay(hr, record).shape == (8, 16, 3)


def test_degrade_matches_its_record():
    hr = np.random.default_rng(4).uniform(0, 1, size=(32, 32, 3)).astype(np.float32)
    pair = degrade(hr, 2, DegradationConfig(), np.random.default_rng(9))
    assert np.array_equal(pair.lr_image, replay(hr, pair.record))
    assert pair.lr_image.min() >= 0.0 and pair.lr_image.max() <= 1.0


def test_disabled_config_is_plain_bicubic():
    record = sample_record((32, 32, 3), 4, DegradationConfig.disabled(), seed=0)
    assert [op.op for op in record.ops] == ["resize"]


def test_record_must_end_at_target_size():
    hr = np.zeros((16, 16, 3), dtype=np.float32)
    record = DegradationRecord(scale=2, seed=0, ops=[JpegOp(quality=50), ResizeOp(out_h=4, out_w=4)])
    with pytest.raises(DegradationError):
        apply_record(hr, record)


def test_indivisible_hr_is_rejected():
    with pytest.raises(DegradationError):
        sample_record((30, 32, 3), 4, DegradationConfig(), seed=0)


def test_blur_keeps_constant_image():
    img = np.full((12, 12, 3), 0.4)
    np.testing.assert_allclose(gaussian_blur(img, 7, 1.5, 0.8, 0.3), img, atol=1e-12)


def test_noise_std_matches_sigma():
    noise = gaussian_noise((256, 256, 3), 0.05, np.random.default_rng(3))
    assert noise.std() == pytest.approx(0.05, rel=0.01)
    assert abs(noise.mean()) < 1e-3


def test_compression_error_grows_as_quality_drops():
    rng = np.random.default_rng(11)
    img = np.clip(resize(rng.random((8, 8, 3)), 32, 32, "bilinear"), 0.0, 1.0)
    errors = [np.abs(compress(img, q) - img).mean() for q in (100, 75, 30, 5)]
    assert errors[0] < 2 / 255
    assert errors == sorted(errors)


def test_many_seeded_pairs_replay_exactly():
    hr = np.random.default_rng(0).uniform(0, 1, size=(16, 16, 3))
    config = DegradationConfig()
    for seed in range(1000):
        pair = degrade(hr, 2, config, np.random.default_rng(seed))
        record = DegradationRecord.model_validate_json(pair.record.model_dump_json())
        assert np.array_equal(pair.lr_image, replay(hr, record)), seed


def test_blur_preserves_a_linear_ramp_away_from_borders():
    ramp = np.tile(np.linspace(0.1, 0.9, 32)[None, :, None], (32, 1, 3))
    out = gaussian_blur(ramp, 7, 1.2, 0.7, 0.4)
    np.testing.assert_allclose(out[4:-4, 4:-4], ramp[4:-4, 4:-4], atol=1e-9)


def test_vanishing_sigma_blur_is_identity():
    img = np.random.default_rng(2).random((10, 12, 3))
    np.testing.assert_allclose(gaussian_blur(img, 5, 1e-6, 1e-6), img, atol=1e-12)


def test_top_quality_compression_of_mid_gray():
    img = np.full((16, 16, 3), 0.5)
    assert np.abs(compress(img, 100) - img).max() <= 1 / 255


@pytest.mark.parametrize(
    "ops",
    [
        [BlurOp(kernel_size=9, sigma_x=2.0, sigma_y=0.5, angle=0.3)],
        [ResizeOp(out_h=5, out_w=5, method="nearest"), ResizeOp(out_h=16, out_w=16, method="bicubic")],
        [NoiseOp(sigma=0.5, seed=4)],
        [JpegOp(quality=5)],
        [ColorJitterOp(brightness=1.6, contrast=1.8, saturation=2.0)],
    ],
)
def test_every_operator_stays_in_unit_range(ops):
    checker = np.indices((16, 16)).sum(axis=0) % 2
    img = np.repeat(checker[..., None], 3, axis=2).astype(np.float64)
    out, _ = apply_record(img, DegradationRecord(scale=1, seed=0, ops=ops))
    assert out.min() >= 0.0 and out.max() <= 1.0
