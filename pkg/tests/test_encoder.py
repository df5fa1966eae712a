"""
Tests for LR ingestion, the joint encoder heads and CTC greedy decoding.
"""

import pytest
import torch

from src.encoder import (
    EncoderOutput,
    TextEncoder,
    assign_box_targets,
    ctc_greedy_decode,
    cxcywh_to_xyxy,
    ingest_lr,
    select_detections,
    xyxy_to_cxcywh,
)
from src.errors import EncoderInputError
from src.recognizer import StructureRecognizer, freeze


def test_ingest_resizes_to_height_32():
    x = ingest_lr(torch.rand(1, 3, 64, 90))
    assert x.shape[2] == 32
    assert x.shape[3] % 4 == 0
    assert x.shape[3] >= 45


def test_ingest_rejects_bad_layout():
    with pytest.raises(EncoderInputError):
        ingest_lr(torch.rand(1, 1, 32, 32))
    with pytest.raises(EncoderInputError):
        ingest_lr(torch.rand(3, 32, 32))


def test_encoder_heads(tiny_profile):
    encoder = TextEncoder(4, tiny_profile).eval()
    out = encoder.encode(torch.rand(2, 3, 32, 40))
    assert out.num_timesteps == 10
    assert out.logits.shape == (2, 10, 5)
    assert out.boxes.shape == (2, 10, 4)
    assert out.boxes.min() >= 0.0 and out.boxes.max() <= 1.0
    assert out.w.shape == (2, tiny_profile.w_dim)
    assert out.image(1).logits.shape == (1, 10, 5)


def test_encoder_input_checks(tiny_profile):
    encoder = TextEncoder(4, tiny_profile)
    with pytest.raises(EncoderInputError):
        encoder(torch.rand(1, 3, 32, 30))
    with pytest.raises(EncoderInputError):
        encoder(torch.rand(1, 3, 16, 32))
    with pytest.raises(EncoderInputError):
        encoder(torch.rand(1, 3, 32, 4 * (tiny_profile.max_tokens + 1)))


def _one_hot(path, vocab):
    return torch.nn.functional.one_hot(torch.tensor(path), vocab).float() * 10


def test_greedy_decode_collapses_runs():
    blank = 2
    tokens = ctc_greedy_decode(_one_hot([0, 0, blank, 0, 1, 1, blank], 3))
    assert tokens == [(0, 0, 1), (0, 3, 3), (1, 4, 5)]
    assert ctc_greedy_decode(_one_hot([blank, blank], 3)) == []


def test_select_detections_one_per_token():
    logits = _one_hot([0, 0, 2, 1], 3)[None]
    boxes = torch.tensor([[[0.1, 0.5, 0.1, 0.8], [0.2, 0.5, 0.1, 0.8], [0.5, 0.5, 0.1, 0.8], [0.7, 0.5, 0.2, 0.8]]])
    out = EncoderOutput(w=torch.zeros(1, 4), logits=logits, boxes=boxes)
    detections = select_detections(out, "max")
    assert [d.code_index for d in detections] == [0, 1]
    assert detections[1].timestep == 3
    mean = select_detections(out, "mean")
    assert mean[0].box[0] == pytest.approx(0.15)


def test_box_conversions_invert():
    xyxy = torch.tensor([[0.1, 0.2, 0.4, 0.9]])
    assert torch.allclose(cxcywh_to_xyxy(xyxy_to_cxcywh(xyxy)), xyxy)


def test_box_target_assignment():
    gt = torch.tensor([[0.0, 0.0, 0.3, 1.0], [0.5, 0.0, 1.0, 1.0]])
    # centers 0.125 0.375 0.625 0.875
    assert assign_box_targets(gt, 4).tolist() == [0, -1, 1, 1]


def test_recognizer_shapes_and_freeze(tiny_profile):
    recognizer = StructureRecognizer(4, dim=tiny_profile.recognizer_dim)
    masks = torch.rand(3, 1, 128, 128)
    assert recognizer(masks).shape == (3, 4)
    freeze(recognizer)
    assert not recognizer.training
    assert not any(p.requires_grad for p in recognizer.parameters())
    assert recognizer.predict(masks).shape == (3,)


def test_batch_rows_are_encoded_independently(tiny_profile):
    encoder = TextEncoder(4, tiny_profile).eval()
    lr = torch.rand(3, 3, 32, 40)
    with torch.no_grad():
        batch = encoder.encode(lr)
        for b in range(3):
            alone = encoder.encode(lr[b : b + 1])
            assert torch.allclose(batch.w[b], alone.w[0], atol=1e-5)
            assert torch.allclose(batch.logits[b], alone.logits[0], atol=1e-5)
            assert torch.allclose(batch.boxes[b], alone.boxes[0], atol=1e-5)
