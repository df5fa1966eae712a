"""
Joint text encoder: style vector w, per-timestep class logits and boxes from an LR line.

LR images are ingested at height 32; a residual CNN reduces width by 4 and
pools height away, so timestep t covers ingest columns [4t, 4t + 4).
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import ENCODER_HEIGHT, ENCODER_STRIDE, ModelProfile
from src.errors import EncoderInputError

logger = logging.getLogger(__name__)


@dataclass
class EncoderOutput:
    w: torch.Tensor
    logits: torch.Tensor
    boxes: torch.Tensor
    pyramid: Optional[List[torch.Tensor]] = None

    @property
    def num_timesteps(self) -> int:
        return self.logits.shape[1]

    def image(self, b: int) -> "EncoderOutput":
        return EncoderOutput(
            w=self.w[b : b + 1],
            logits=self.logits[b : b + 1],
            boxes=self.boxes[b : b + 1],
            pyramid=[p[b : b + 1] for p in self.pyramid] if self.pyramid is not None else None,
        )


@dataclass
class CharacterDetection:
    code_index: int
    box: Tuple[float, float, float, float]
    timestep: int
    confidence: float


def ingest_lr(lr: torch.Tensor) -> torch.Tensor:
    """Bicubic resize to height 32 keeping aspect, then zero-pad width to a multiple of 4."""
    if lr.dim() != 4 or lr.shape[1] != 3:
        raise EncoderInputError(f"Expected a B x 3 x H x W batch, got shape {tuple(lr.shape)}")
    _, _, h, w = lr.shape
    if h != ENCODER_HEIGHT:
        new_w = max(math.ceil(w * ENCODER_HEIGHT / h), 1)
        lr = F.interpolate(lr, size=(ENCODER_HEIGHT, new_w), mode="bicubic", align_corners=False, antialias=h > ENCODER_HEIGHT)
    pad = -lr.shape[3] % ENCODER_STRIDE
    if pad:
        lr = F.pad(lr, (0, pad))
    return lr


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, bw, bh = boxes.unbind(-1)
    xyxy = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)
    return xyxy.clamp(0.0, 1.0)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def assign_box_targets(gt_boxes: torch.Tensor, num_timesteps: int) -> torch.Tensor:
    """Index of the GT box containing each timestep's receptive-field center, or -1."""
    centers = (torch.arange(num_timesteps, dtype=torch.float64) + 0.5) / num_timesteps
    assignment = torch.full((num_timesteps,), -1, dtype=torch.long)
    for i in range(gt_boxes.shape[0] - 1, -1, -1):
        x1, x2 = float(gt_boxes[i, 0]), float(gt_boxes[i, 2])
        assignment[(centers >= x1) & (centers < x2)] = i
    return assignment


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: Tuple[int, int] = (1, 1)):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.downsample = None
        if stride != (1, 1) or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False), nn.BatchNorm2d(out_channels)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Residual stack; returns the feature pyramid at heights 32, 16, 8, 4, 2."""

    strides = ((2, 2), (2, 2), (2, 1), (2, 1))

    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256, 256)):
        super().__init__()
        self.channels = tuple(channels)
        self.stem = nn.Sequential(
            nn.Conv2d(3, channels[0], 3, padding=1, bias=False), nn.BatchNorm2d(channels[0]), nn.ReLU(inplace=True)
        )
        self.stages = nn.ModuleList(
            nn.Sequential(BasicBlock(channels[i], channels[i + 1], stride), BasicBlock(channels[i + 1], channels[i + 1]))
            for i, stride in enumerate(self.strides)
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        pyramid = [self.stem(x)]
        for stage in self.stages:
            pyramid.append(stage(pyramid[-1]))
        return pyramid


class TextEncoder(nn.Module):
    def __init__(self, num_classes: int, profile: Optional[ModelProfile] = None):
        super().__init__()
        profile = profile or ModelProfile()
        self.num_classes = num_classes
        self.blank_index = num_classes
        self.max_tokens = profile.max_tokens
        d = profile.d_model
        self.backbone = Backbone(profile.backbone_channels)
        self.proj = nn.Linear(profile.backbone_channels[-1], d)
        self.pos_embed = nn.Parameter(torch.zeros(1, profile.max_tokens, d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        layer = nn.TransformerEncoderLayer(d, profile.transformer_heads, dim_feedforward=d * 4, dropout=0.1, batch_first=True)
        self.transformer = nn.TransformerEncoder(layer, profile.transformer_layers, enable_nested_tensor=False)
        self.class_head = nn.Linear(d, num_classes + 1)
        self.box_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, 4))
        self.style_head = nn.Linear(d, profile.w_dim)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        """`x` is an ingested batch: B x 3 x 32 x W with W a multiple of 4."""
        if x.dim() != 4 or x.shape[2] != ENCODER_HEIGHT:
            raise EncoderInputError(f"Encoder input height must be {ENCODER_HEIGHT}, got shape {tuple(x.shape)}")
        if x.shape[3] % ENCODER_STRIDE:
            raise EncoderInputError(f"Encoder input width must be a multiple of {ENCODER_STRIDE}, got {x.shape[3]}")
        T = x.shape[3] // ENCODER_STRIDE
        if T > self.max_tokens:
            raise EncoderInputError(f"Line too wide: {T} timesteps exceed the cap of {self.max_tokens}")
        pyramid = self.backbone(x)
        tokens = self.proj(pyramid[-1].mean(dim=2).transpose(1, 2)) + self.pos_embed[:, :T]
        tokens = self.transformer(tokens)
        return EncoderOutput(
            w=self.style_head(tokens.mean(dim=1)),
            logits=self.class_head(tokens),
            boxes=torch.sigmoid(self.box_head(tokens)),
            pyramid=pyramid,
        )

    def encode(self, lr: torch.Tensor) -> EncoderOutput:
        return self(ingest_lr(lr))


def ctc_greedy_decode(logits: torch.Tensor, blank: Optional[int] = None) -> List[Tuple[int, int, int]]:
    """Collapse the per-timestep argmax path; returns (code, run_start, run_end) with inclusive ends."""
    if logits.dim() != 2:
        raise EncoderInputError(f"Expected T x V logits, got shape {tuple(logits.shape)}")
    blank = logits.shape[1] - 1 if blank is None else blank
    path = logits.argmax(dim=1).tolist()
    tokens: List[Tuple[int, int, int]] = []
    prev = blank
    for t, k in enumerate(path):
        if k != blank:
            if k == prev:
                code, start, _ = tokens[-1]
                tokens[-1] = (code, start, t)
            else:
                tokens.append((k, t, t))
        prev = k
    return tokens


def select_detections(output: EncoderOutput, mode: str = "max") -> List[CharacterDetection]:
    """One detection per decoded token of a single-image output."""
    logits, boxes = output.logits[0], output.boxes[0]
    probs = torch.softmax(logits.detach().float(), dim=1)
    detections = []
    for code, start, end in ctc_greedy_decode(logits):
        run = probs[start : end + 1, code]
        t = start + int(run.argmax())
        if mode == "mean":
            box = boxes[start : end + 1].detach().mean(dim=0)
        else:
            box = boxes[t].detach()
        detections.append(
            CharacterDetection(code_index=code, box=tuple(float(v) for v in box), timestep=t, confidence=float(probs[t, code]))
        )
    return detections
