"""
Tests for the SR network geometry (roi_align / paste_back), AdaIN, SFT and
prior injection.
"""

import pytest
import torch
from torchvision.ops import roi_align as tv_roi_align

from src.errors import GeometryError
from src.srnet import (
    Guidance,
    PriorTransform,
    SFTLayer,
    StructurePriorSR,
    adain,
    box_pixel_mask,
    character_crops,
    paste_back,
    roi_align,
    super_resolve,
)
from src.training import sr_optimizer


def test_adain_matches_content_statistics():
    prior = torch.randn(1, 2, 8, 8) * 3 + 1
    content = torch.randn(1, 2, 8, 8) * 0.5 - 2
    out = adain(prior, content)
    assert torch.allclose(out.mean(dim=(2, 3)), content.mean(dim=(2, 3)), atol=1e-4)
    assert torch.allclose(out.std(dim=(2, 3), unbiased=False), content.std(dim=(2, 3), unbiased=False), atol=1e-3)


def test_adain_two_value_example():
    prior = torch.tensor([3.0, 7.0]).view(1, 1, 1, 2)
    content = torch.tensor([0.0, 2.0]).view(1, 1, 1, 2)
    out = adain(prior, content)
    # prior standardizes to -+1 (std 2), then takes content mean 1 and std 1
    assert torch.allclose(out.flatten(), torch.tensor([0.0, 2.0]), atol=1e-5)


def test_adain_constant_content_is_finite():
    out = adain(torch.randn(1, 3, 4, 4), torch.full((1, 3, 4, 4), 0.25))
    assert torch.isfinite(out).all()
    assert torch.allclose(out, torch.full_like(out, 0.25), atol=1e-4)


def test_adain_channel_mismatch():
    with pytest.raises(GeometryError):
        adain(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 4, 4))


def test_roi_center_sample():
    fmap = torch.tensor([[0.0, 1.0], [2.0, 3.0]]).view(1, 1, 2, 2)
    assert float(roi_align(fmap, (0, 0, 1, 1), 1).crop) == pytest.approx(1.5)


def test_roi_full_box_is_identity():
    fmap = torch.randn(2, 3, 8, 16)
    crop = roi_align(fmap, (0.0, 0.0, 1.0, 1.0), (8, 16)).crop
    assert torch.allclose(crop, fmap, atol=1e-6)


@pytest.mark.parametrize("box", [(0.1, 0.2, 0.6, 0.9), (0.25, 0.0, 0.5, 1.0), (0.3, 0.3, 0.4, 0.5)])
def test_roi_matches_torchvision(box):
    fmap = torch.randn(1, 4, 16, 32, dtype=torch.float64)
    h, w = fmap.shape[-2:]
    rois = torch.tensor([[0, box[0] * w, box[1] * h, box[2] * w, box[3] * h]], dtype=torch.float64)
    expected = tv_roi_align(fmap, rois, output_size=(8, 8), spatial_scale=1.0, sampling_ratio=1, aligned=True)
    assert torch.allclose(roi_align(fmap, box, 8).crop, expected, atol=1e-9)


@pytest.mark.parametrize("box", [(0.5, 0.1, 0.5, 0.9), (0.1, 0.1, 1.2, 0.9), (0.6, 0.1, 0.4, 0.9)])
def test_roi_rejects_bad_boxes(box):
    with pytest.raises(GeometryError):
        roi_align(torch.zeros(1, 1, 4, 4), box, 2)


def test_paste_back_is_local():
    fmap = torch.randn(1, 2, 16, 32)
    box = (0.25, 0.25, 0.5, 0.75)
    out = paste_back(fmap, torch.full((1, 2, 8, 8), 5.0), box)
    mask = box_pixel_mask(box, 16, 32)
    assert torch.equal(out[..., ~mask], fmap[..., ~mask])
    assert torch.allclose(out[..., mask], torch.full_like(out[..., mask], 5.0), atol=1e-5)


def test_paste_of_own_crop_is_identity_on_full_box():
    fmap = torch.randn(1, 2, 8, 8)
    crop = roi_align(fmap, (0, 0, 1, 1), 8).crop
    assert torch.allclose(paste_back(fmap, crop, (0, 0, 1, 1)), fmap, atol=1e-5)


def test_character_crops_order_and_shape():
    images = torch.rand(2, 3, 32, 64)
    boxes = [torch.tensor([[0.0, 0.0, 0.5, 1.0], [0.5, 0.0, 1.0, 1.0]]), torch.tensor([[0.0, 0.0, 1.0, 1.0]])]
    crops = character_crops(images, boxes, size=16)
    assert crops.shape == (3, 3, 16, 16)
    assert torch.allclose(crops[1], roi_align(images[0:1], boxes[0][1], 16).crop[0])
    assert character_crops(images, [torch.zeros(0, 4), torch.zeros(0, 4)], 16).shape == (0, 3, 16, 16)


def test_sft_starts_as_identity():
    sft = SFTLayer(4)
    content = torch.randn(1, 4, 8, 8)
    assert torch.equal(sft(torch.randn(1, 4, 8, 8), content), content)
    with pytest.raises(GeometryError):
        sft(torch.randn(1, 4, 4, 4), content)


def test_prior_transform_starts_as_identity():
    transform = PriorTransform(8, 4, 6)
    fmap = torch.randn(1, 4, 8, 32)
    boxes = torch.tensor([[0.5, 0.0, 0.75, 1.0], [0.0, 0.0, 0.25, 1.0]])
    out = transform(fmap, torch.randn(2, 6, 8, 8), boxes)
    assert torch.allclose(out, fmap, atol=1e-6)


@pytest.fixture
def sr_model(tiny_profile):
    return StructurePriorSR(4, 4, tiny_profile).eval()


def test_sr_output_geometry(sr_model):
    lr = torch.rand(2, 3, 32, 24)
    out = sr_model(lr)
    assert out.sr.shape == (2, 3, 128, 96)
    assert out.sr.min() >= 0.0 and out.sr.max() <= 1.0
    assert len(out.guidance.codes) == 2


def test_sr_rejects_wrong_lr_height(sr_model):
    with pytest.raises(GeometryError):
        sr_model(torch.rand(1, 3, 16, 32))


def test_prior_injection_is_identity_at_init(sr_model):
    lr = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        plain = sr_model(lr, Guidance(codes=[torch.zeros(0, dtype=torch.long)], boxes=[torch.zeros(0, 4)]))
        guided = sr_model(lr, Guidance(codes=[torch.tensor([1, 2])], boxes=[torch.tensor([[0.1, 0.1, 0.4, 0.9], [0.5, 0.1, 0.8, 0.9]])]))
    assert guided.priors is not None and plain.priors is None
    assert guided.priors.structure.shape == (2, 1, 128, 128)
    assert torch.allclose(plain.sr, guided.sr, atol=1e-6)


def test_zero_prior_rate_freezes_generator(sr_model, tiny_config):
    config = tiny_config(lr_prior_finetune=0.0)
    optimizer = sr_optimizer(sr_model, config)
    assert [g["name"] for g in optimizer.param_groups] == ["main"]
    before = [p.detach().clone() for p in sr_model.prior_parameters()]
    sr_model.train()
    out = sr_model(torch.rand(1, 3, 32, 32), Guidance(codes=[torch.tensor([0])], boxes=[torch.tensor([[0.2, 0.1, 0.6, 0.9]])]))
    optimizer.zero_grad()
    (out.sr.mean() + out.encoder.logits.mean()).backward()
    optimizer.step()
    assert all(torch.equal(a, b) for a, b in zip(before, sr_model.prior_parameters()))


def test_prior_group_has_its_own_rate(sr_model, tiny_config):
    optimizer = sr_optimizer(sr_model, tiny_config(lr_main=1e-4, lr_prior_finetune=1e-6))
    rates = {g["name"]: g["lr"] for g in optimizer.param_groups}
    assert rates == {"main": 1e-4, "prior": 1e-6}


def test_super_resolve_reports_sr_pixels(sr_model):
    lr = torch.rand(32, 40, 3).numpy()
    result = super_resolve(lr, sr_model)
    assert result.sr_image.shape == (128, 160, 3)
    assert len(result.text) == len(result.boxes) == len(result.confidences) == len(result.structures)
    for x1, y1, x2, y2 in result.boxes:
        assert 0 <= x1 < x2 and 0 <= y1 < y2 <= 128


def test_paste_back_locality_on_random_boxes():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        x0, y0 = (torch.rand(2, generator=gen) * 0.6).tolist()
        w, h = (torch.rand(2, generator=gen) * 0.35 + 0.05).tolist()
        box = (x0, y0, x0 + w, y0 + h)
        fmap = torch.randn(1, 3, 16, 48, generator=gen)
        out = paste_back(fmap, torch.randn(1, 3, 8, 8, generator=gen), box)
        outside = ~box_pixel_mask(box, 16, 48)
        assert torch.equal(out[..., outside], fmap[..., outside])


def test_paste_back_of_disjoint_boxes_commutes():
    fmap = torch.randn(1, 3, 16, 32)
    left, right = (0.0, 0.1, 0.4, 0.9), (0.5, 0.0, 1.0, 1.0)
    a, b = torch.randn(1, 3, 8, 8), torch.randn(1, 3, 8, 8)
    one_way = paste_back(paste_back(fmap, a, left), b, right)
    other_way = paste_back(paste_back(fmap, b, right), a, left)
    assert torch.equal(one_way, other_way)


def _wake_sft(module):
    """Give the zero-initialized SFT output convs small random weights so gradients flow through them."""
    gen = torch.Generator().manual_seed(1)
    for layer in module.modules():
        if isinstance(layer, SFTLayer):
            for conv in (layer.scale_conv1, layer.shift_conv1):
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.1)
                    conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
    return module


def test_sft_gradcheck():
    sft = _wake_sft(SFTLayer(2)).double()
    prior = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    content = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(sft, (prior, content))


@pytest.mark.parametrize("paste_mode", ["residual", "replace"])
def test_prior_transform_gradcheck(paste_mode):
    transform = _wake_sft(PriorTransform(4, 2, 3, paste_mode)).double()
    boxes = torch.tensor([[0.55, 0.0, 0.95, 1.0], [0.05, 0.1, 0.45, 0.9]], dtype=torch.float64)
    fmap = torch.randn(1, 2, 4, 16, dtype=torch.float64, requires_grad=True)
    priors = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda f, p: transform(f, p, boxes), (fmap, priors))


def test_sr_loss_reaches_encoder_and_codebook(sr_model):
    _wake_sft(sr_model).train()
    guidance = Guidance(codes=[torch.tensor([1, 3])], boxes=[torch.tensor([[0.1, 0.1, 0.4, 0.9], [0.5, 0.1, 0.8, 0.9]])])
    out = sr_model(torch.rand(1, 3, 32, 32), guidance)
    out.sr.mean().backward()

    encoder_grads = [p.grad for p in sr_model.encoder.parameters() if p.grad is not None]
    assert encoder_grads and any(bool(g.abs().sum() > 0) for g in encoder_grads)
    table_grad = sr_model.generator.codebook.table.grad
    assert table_grad is not None
    assert table_grad[1].abs().sum() > 0 and table_grad[3].abs().sum() > 0
    assert torch.equal(table_grad[0], torch.zeros_like(table_grad[0]))
    assert torch.equal(table_grad[2], torch.zeros_like(table_grad[2]))
