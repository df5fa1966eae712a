"""
Training objectives: CTC recognition, box regression, reconstruction with a
perceptual term, hinge adversarial losses, structure L1 and their weighted sum.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import LossWeights
from src.encoder import assign_box_targets, cxcywh_to_xyxy, xyxy_to_cxcywh
from src.errors import CTCFeasibilityError, LossInputError, NonFiniteLossError
from src.layers import ResidualDiscriminator

logger = logging.getLogger(__name__)

# report term -> LossWeights field
TERM_WEIGHTS = {
    "pixel": "rec",
    "perceptual": "per",
    "ctc": "ctc",
    "box_l1": "box_l1",
    "box_giou": "box_giou",
    "adv": "adv",
    "structure": "structure",
}


# ---------------------------------------------------------------------------
# Recognition
# ---------------------------------------------------------------------------


def ctc_min_length(target: Sequence[int]) -> int:
    """Shortest input that can emit `target`: one step per label plus a blank between repeats."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _check_ctc(num_steps: int, vocab: int, target: Sequence[int]) -> None:
    if any(not 0 <= int(k) < vocab - 1 for k in target):
        raise LossInputError(f"CTC target contains indices outside [0, {vocab - 1}): {list(target)}")
    need = ctc_min_length(target)
    if need > num_steps:
        raise CTCFeasibilityError(f"Target of length {len(target)} needs {need} timesteps, only {num_steps} available")


def ctc_loss(logits: torch.Tensor, target: Sequence[int]) -> torch.Tensor:
    """-log P(target | logits) for T x V logits; the blank is the last class."""
    if logits.dim() != 2:
        raise LossInputError(f"Expected T x V logits, got shape {tuple(logits.shape)}")
    T, V = logits.shape
    target = [int(k) for k in target]
    _check_ctc(T, V, target)
    log_probs = F.log_softmax(logits, dim=1).unsqueeze(1)
    targets = torch.tensor(target, dtype=torch.long, device=logits.device)
    return F.ctc_loss(log_probs, targets, [T], [len(target)], blank=V - 1, reduction="sum", zero_infinity=False)


def ctc_loss_batch(logits: torch.Tensor, targets: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean per-image CTC loss over a B x T x V batch."""
    B, T, V = logits.shape
    if len(targets) != B:
        raise LossInputError(f"{len(targets)} targets for a batch of {B}")
    flat: List[int] = []
    lengths = []
    for target in targets:
        target = [int(k) for k in target]
        _check_ctc(T, V, target)
        flat.extend(target)
        lengths.append(len(target))
    log_probs = F.log_softmax(logits, dim=2).transpose(0, 1)
    flat_t = torch.tensor(flat, dtype=torch.long, device=logits.device)
    losses = F.ctc_loss(log_probs, flat_t, [T] * B, lengths, blank=V - 1, reduction="none", zero_infinity=False)
    return losses.mean()


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    return F.smooth_l1_loss(pred, target, beta=beta, reduction="mean")


def generalized_iou(pred: torch.Tensor, target: torch.Tensor, eps: float = 0.0) -> Tuple[torch.Tensor, torch.Tensor]:
    """Elementwise (giou, iou) of xyxy boxes."""
    pred_area = (pred[..., 2] - pred[..., 0]) * (pred[..., 3] - pred[..., 1])
    target_area = (target[..., 2] - target[..., 0]) * (target[..., 3] - target[..., 1])
    lt = torch.max(pred[..., :2], target[..., :2])
    rb = torch.min(pred[..., 2:], target[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = pred_area + target_area - inter
    iou = inter / (union + eps)
    lt = torch.min(pred[..., :2], target[..., :2])
    rb = torch.max(pred[..., 2:], target[..., 2:])
    wh = (rb - lt).clamp(min=0)
    enclosure = wh[..., 0] * wh[..., 1]
    giou = iou - (enclosure - union) / (enclosure + eps)
    return giou, iou


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return generalized_iou(a, b)[1]


def giou_loss(pred: torch.Tensor, target: torch.Tensor, strict: bool = True, eps: float = 0.0) -> torch.Tensor:
    """Mean of 1 - GIoU; in [0, 2] for valid boxes."""
    if strict:
        for name, boxes in (("pred", pred), ("target", target)):
            if bool(((boxes[..., 2] <= boxes[..., 0]) | (boxes[..., 3] <= boxes[..., 1])).any()):
                raise LossInputError(f"Degenerate {name} box in GIoU loss")
    giou, _ = generalized_iou(pred, target, eps)
    return (1.0 - giou).mean()


def box_losses(pred_boxes: torch.Tensor, gt_boxes: Sequence[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Smooth-L1 (on cxcywh) and GIoU (on xyxy) over timesteps assigned to a GT box."""
    preds, targets = [], []
    T = pred_boxes.shape[1]
    for b, gt in enumerate(gt_boxes):
        if gt.numel() == 0:
            continue
        assignment = assign_box_targets(gt, T).to(pred_boxes.device)
        mask = assignment >= 0
        if bool(mask.any()):
            preds.append(pred_boxes[b][mask])
            targets.append(gt.to(pred_boxes)[assignment[mask]])
    if not preds:
        zero = pred_boxes.sum() * 0.0
        return zero, zero
    pred = torch.cat(preds)
    target = torch.cat(targets)
    l1 = smooth_l1(pred, xyxy_to_cxcywh(target))
    giou = giou_loss(cxcywh_to_xyxy(pred), target, strict=False, eps=1e-7)
    return l1, giou


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Frozen 4-stage feature network; forward returns the four tap activations."""

    VGG_TAPS = ((0, 4), (4, 9), (9, 18), (18, 27))

    def __init__(self, stages: nn.ModuleList, mean: Optional[Sequence[float]] = None, std: Optional[Sequence[float]] = None):
        super().__init__()
        self.stages = stages
        self.register_buffer("mean", torch.tensor(mean or (0.0, 0.0, 0.0)).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std or (1.0, 1.0, 1.0)).view(1, 3, 1, 1))
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def random(cls, seed: int = 0, channels: Sequence[int] = (16, 32, 64, 128)) -> "FeatureExtractor":
        """Seed-deterministic random conv net."""
        gen = torch.Generator().manual_seed(seed)
        stages = nn.ModuleList()
        prev = 3
        for i, ch in enumerate(channels):
            layers: List[nn.Module] = [nn.AvgPool2d(2)] if i else []
            for in_ch in (prev, ch):
                conv = nn.Conv2d(in_ch, ch, 3, padding=1)
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (in_ch * 9)) ** 0.5)
                    conv.bias.zero_()
                layers += [conv, nn.ReLU()]
            stages.append(nn.Sequential(*layers))
            prev = ch
        return cls(stages)

    @classmethod
    def from_vgg19(cls, path: Optional[str] = None) -> "FeatureExtractor":
        """VGG-19 taps after relu1_2, relu2_2, relu3_4 and relu4_4; weights from a state-dict file."""
        from torchvision.models import vgg19

        model = vgg19(weights=None)
        if path:
            model.load_state_dict(torch.load(path, map_location="cpu"))
        features = model.features
        stages = nn.ModuleList(nn.Sequential(*features[a:b]) for a, b in cls.VGG_TAPS)
        return cls(stages, mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = (x - self.mean.to(x)) / self.std.to(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps


def rec_loss_terms(sr: torch.Tensor, hr: torch.Tensor, extractor: Optional[FeatureExtractor]) -> Tuple[torch.Tensor, torch.Tensor]:
    """(mean |sr - hr|, sum over taps of mean |phi_i(sr) - phi_i(hr)|)."""
    if sr.shape != hr.shape:
        raise LossInputError(f"SR/HR shape mismatch: {tuple(sr.shape)} vs {tuple(hr.shape)}")
    pixel = (sr - hr).abs().mean()
    if extractor is None:
        return pixel, torch.zeros_like(pixel)
    extractor = extractor.to(dtype=sr.dtype)
    perceptual = sum((a - b).abs().mean() for a, b in zip(extractor(sr), extractor(hr)))
    return pixel, perceptual


def rec_loss(sr: torch.Tensor, hr: torch.Tensor, extractor: Optional[FeatureExtractor], per: float = 0.05) -> torch.Tensor:
    pixel, perceptual = rec_loss_terms(sr, hr, extractor if per else None)
    return pixel + per * perceptual


# ---------------------------------------------------------------------------
# Adversarial and structure
# ---------------------------------------------------------------------------


def hinge_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def hinge_g(d_fake: torch.Tensor) -> torch.Tensor:
    return -d_fake.mean()


class ConditionedDiscriminator(ResidualDiscriminator):
    """Scores a 128x128 character crop together with its structure image (4 channels)."""

    def __init__(self, base_channels: int = 32):
        super().__init__(4, base_channels)

    def forward(self, image: torch.Tensor, structure: torch.Tensor) -> torch.Tensor:
        return super().forward(torch.cat([image, structure], dim=1))


def structure_loss(s_sr: torch.Tensor, s_hr: torch.Tensor) -> torch.Tensor:
    if s_sr.shape != s_hr.shape:
        raise LossInputError(f"Structure shape mismatch: {tuple(s_sr.shape)} vs {tuple(s_hr.shape)}")
    return (s_sr - s_hr.to(s_sr)).abs().mean()


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------


def total_sr_loss(terms: Dict[str, torch.Tensor], weights: LossWeights) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted sum of the given unweighted terms; the report holds every unweighted value."""
    total = None
    report: Dict[str, float] = {}
    for name, value in terms.items():
        if name not in TERM_WEIGHTS:
            raise LossInputError(f"Unknown loss term '{name}'")
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteLossError(name, float(value.detach().double().mean()))
        report[name] = float(value.detach())
        weighted = getattr(weights, TERM_WEIGHTS[name]) * value
        total = weighted if total is None else total + weighted
    if total is None:
        raise LossInputError("No loss terms given")
    report["total"] = float(total.detach())
    return total, report
