"""
Structure-prior text super-resolution network.

Per detected character, the LR feature map is cropped to the prior's spatial
size (roi_align), the generator's prior features are re-standardized to the
crop's statistics (adain), turned into a spatial affine modulation of the crop
(SFT), and the result is written back into the box (paste_back). This happens
at feature heights 32 and/or 64 inside a UNet decoder stacked on the encoder's
backbone.

Boxes are normalized (x1, y1, x2, y2) in [0, 1]. Grid point j of n samples the
source at pixel coordinate start + (j + 0.5) * extent / n - 0.5 with bilinear
weights and clamped indices, so a full-image box with n equal to the map size
is an exact identity.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config import HR_HEIGHT, ModelProfile
from src.encoder import CharacterDetection, EncoderOutput, TextEncoder, cxcywh_to_xyxy, ingest_lr, select_detections
from src.errors import GeometryError
from src.priorgan import PRIOR_SCALES, PriorBundle, StructureGenerator

logger = logging.getLogger(__name__)

BoxLike = Union[torch.Tensor, Sequence[float]]
MIN_BOX_EXTENT = 1e-3


@dataclass
class CharacterCrop:
    crop: torch.Tensor
    box: Tuple[float, float, float, float]
    scale: int


@dataclass
class Guidance:
    """Per-image character codes and normalized xyxy boxes used to condition prior injection."""

    codes: List[torch.Tensor]
    boxes: List[torch.Tensor]


@dataclass
class SROutput:
    sr: torch.Tensor
    encoder: EncoderOutput
    guidance: Guidance
    priors: Optional[PriorBundle] = None
    char_image: Optional[torch.Tensor] = None
    detections: List[List[CharacterDetection]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def _as_box(box: BoxLike) -> Tuple[float, float, float, float]:
    if isinstance(box, torch.Tensor):
        box = box.detach().cpu().tolist()
    x1, y1, x2, y2 = (float(v) for v in box)
    tol = 1e-6
    if min(x1, y1) < -tol or max(x2, y2) > 1 + tol:
        raise GeometryError(f"Box {box} is outside [0, 1]")
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise GeometryError(f"Degenerate box {box}")
    return x1, y1, x2, y2


def sampling_matrix(start: float, extent: float, n: int, size: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """n x size bilinear sampling weights for the grid convention above."""
    j = torch.arange(n, dtype=torch.float64)
    x = start + (j + 0.5) * (extent / n) - 0.5
    x0 = torch.floor(x)
    lam = x - x0
    i0 = x0.long().clamp(0, size - 1)
    i1 = (x0.long() + 1).clamp(0, size - 1)
    mat = torch.zeros(n, size, dtype=torch.float64)
    rows = torch.arange(n)
    mat.index_put_((rows, i0), 1.0 - lam, accumulate=True)
    mat.index_put_((rows, i1), lam, accumulate=True)
    return mat.to(dtype=dtype, device=device)


def _pixel_resample_matrix(start: float, extent: float, n: int, size: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """size x n weights sampling an n-long crop at every pixel center of the map."""
    p = torch.arange(size, dtype=torch.float64) + 0.5
    u = (p - start) * (n / extent) - 0.5
    u0 = torch.floor(u)
    lam = u - u0
    i0 = u0.long().clamp(0, n - 1)
    i1 = (u0.long() + 1).clamp(0, n - 1)
    mat = torch.zeros(size, n, dtype=torch.float64)
    rows = torch.arange(size)
    mat.index_put_((rows, i0), 1.0 - lam, accumulate=True)
    mat.index_put_((rows, i1), lam, accumulate=True)
    return mat.to(dtype=dtype, device=device)


def _size_pair(out_size: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    if min(out_size) < 1:
        raise GeometryError(f"Output size must be at least 1, got {out_size}")
    return out_size


def roi_align(feature_map: torch.Tensor, box: BoxLike, out_size: Union[int, Tuple[int, int]]) -> CharacterCrop:
    """Bilinear crop of a B x C x H x W map to B x C x s x s."""
    x1, y1, x2, y2 = _as_box(box)
    oh, ow = _size_pair(out_size)
    _, _, h, w = feature_map.shape
    ay = sampling_matrix(y1 * h, (y2 - y1) * h, oh, h, feature_map.dtype, feature_map.device)
    ax = sampling_matrix(x1 * w, (x2 - x1) * w, ow, w, feature_map.dtype, feature_map.device)
    crop = torch.einsum("sh,bchw,tw->bcst", ay, feature_map, ax)
    return CharacterCrop(crop=crop, box=(x1, y1, x2, y2), scale=oh)


def character_crops(images: torch.Tensor, boxes: Sequence[torch.Tensor], size: int = HR_HEIGHT) -> torch.Tensor:
    """Stack of size x size crops, one per box, in image order then box order."""
    crops = []
    for b, image_boxes in enumerate(boxes):
        for box in image_boxes:
            crops.append(roi_align(images[b : b + 1], box, size).crop)
    if not crops:
        return images.new_zeros(0, images.shape[1], size, size)
    return torch.cat(crops, dim=0)


def box_pixel_mask(box: BoxLike, height: int, width: int, device=None) -> torch.Tensor:
    """H x W bool mask of pixels whose centers lie inside the box (half-open)."""
    x1, y1, x2, y2 = _as_box(box)
    ys = (torch.arange(height, dtype=torch.float64, device=device) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float64, device=device) + 0.5) / width
    in_y = (ys >= y1) & (ys < y2)
    in_x = (xs >= x1) & (xs < x2)
    return in_y[:, None] & in_x[None, :]


def paste_back(feature_map: torch.Tensor, fused_crop: torch.Tensor, box: BoxLike) -> torch.Tensor:
    """Write the crop into the box by normalized transpose splatting; pixels outside the box are untouched."""
    x1, y1, x2, y2 = _as_box(box)
    _, _, h, w = feature_map.shape
    oh, ow = fused_crop.shape[-2:]
    dtype, device = feature_map.dtype, feature_map.device
    ay = sampling_matrix(y1 * h, (y2 - y1) * h, oh, h, dtype, device)
    ax = sampling_matrix(x1 * w, (x2 - x1) * w, ow, w, dtype, device)
    num = torch.einsum("sh,bcst,tw->bchw", ay, fused_crop, ax)
    den = ay.sum(dim=0)[:, None] * ax.sum(dim=0)[None, :]
    reached = den > 0
    splat = num / torch.where(reached, den, torch.ones_like(den))
    if not bool(reached.all()):
        by = _pixel_resample_matrix(y1 * h, (y2 - y1) * h, oh, h, dtype, device)
        bx = _pixel_resample_matrix(x1 * w, (x2 - x1) * w, ow, w, dtype, device)
        filled = torch.einsum("hs,bcst,wt->bchw", by, fused_crop, bx)
        splat = torch.where(reached, splat, filled)
    mask = box_pixel_mask((x1, y1, x2, y2), h, w, device)
    return torch.where(mask, splat, feature_map)


# ---------------------------------------------------------------------------
# Prior transform
# ---------------------------------------------------------------------------


def adain(prior: torch.Tensor, content: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Re-standardize each prior channel to the content channel's mean and std (population stats)."""
    if prior.shape[:2] != content.shape[:2]:
        raise GeometryError(f"AdaIN needs matching batch/channels, got {tuple(prior.shape)} and {tuple(content.shape)}")
    p_mean = prior.mean(dim=(2, 3), keepdim=True)
    p_var = prior.var(dim=(2, 3), keepdim=True, unbiased=False)
    c_mean = content.mean(dim=(2, 3), keepdim=True)
    c_std = content.var(dim=(2, 3), keepdim=True, unbiased=False).clamp_min(1e-12).sqrt()
    return (prior - p_mean) / torch.sqrt(p_var + eps) * c_std + c_mean


class SFTLayer(nn.Module):
    """Predicts per-pixel (gamma, beta) from the prior; output = content * (1 + gamma) + beta."""

    def __init__(self, channels: int, hidden: Optional[int] = None):
        super().__init__()
        hidden = hidden or channels
        self.scale_conv0 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.scale_conv1 = nn.Conv2d(hidden, channels, 3, padding=1)
        self.shift_conv0 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.shift_conv1 = nn.Conv2d(hidden, channels, 3, padding=1)
        for conv in (self.scale_conv1, self.shift_conv1):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def condition(self, prior: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        gamma = self.scale_conv1(F.leaky_relu(self.scale_conv0(prior), 0.1))
        beta = self.shift_conv1(F.leaky_relu(self.shift_conv0(prior), 0.1))
        return gamma, beta

    def forward(self, prior: torch.Tensor, content: torch.Tensor) -> torch.Tensor:
        if prior.shape[-2:] != content.shape[-2:]:
            raise GeometryError(f"SFT spatial mismatch: {tuple(prior.shape[-2:])} vs {tuple(content.shape[-2:])}")
        gamma, beta = self.condition(prior)
        return content * (1 + gamma) + beta


def sft_modulate(sft: SFTLayer, normalized_prior: torch.Tensor, content_crop: torch.Tensor) -> torch.Tensor:
    return sft(normalized_prior, content_crop)


class PriorTransform(nn.Module):
    """roi_align -> 1x1 projection -> adain -> SFT -> paste_back, per character, left to right."""

    def __init__(self, scale: int, content_channels: int, prior_channels: int, paste_mode: Literal["residual", "replace"] = "residual"):
        super().__init__()
        self.scale = scale
        self.paste_mode = paste_mode
        self.proj = nn.Conv2d(prior_channels, content_channels, 1)
        self.sft = SFTLayer(content_channels)

    def forward(self, feature_map: torch.Tensor, priors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """`feature_map` is 1 x C x s x W; `priors` is n x Cp x s x s; `boxes` is n x 4."""
        order = torch.argsort(boxes[:, 0], stable=True).tolist()
        for i in order:
            crop = roi_align(feature_map, boxes[i], self.scale).crop
            prior = adain(self.proj(priors[i : i + 1]), crop)
            fused = self.sft(prior, crop)
            if self.paste_mode == "replace":
                feature_map = paste_back(feature_map, fused, boxes[i])
            else:
                delta = paste_back(torch.zeros_like(feature_map), fused - crop, boxes[i])
                mask = box_pixel_mask(boxes[i], feature_map.shape[2], feature_map.shape[3], feature_map.device)
                feature_map = torch.where(mask, feature_map + delta, feature_map)
        return feature_map


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class ConvBlock(nn.Sequential):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        )


class UpBlock(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.block = ConvBlock(in_channels + skip_channels, out_channels)

    def forward(self, x: torch.Tensor, size: Tuple[int, int], skips: Sequence[torch.Tensor] = ()) -> torch.Tensor:
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.block(torch.cat([x, *skips], dim=1))


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(F.relu(self.conv1(x)))


class StructurePriorSR(nn.Module):
    """Encoder + prior generator + UNet decoder with prior injection + reconstruction head."""

    def __init__(
        self,
        num_codes: int,
        scale: int = 4,
        profile: Optional[ModelProfile] = None,
        prior_scales: Sequence[int] = PRIOR_SCALES,
        generator: Optional[StructureGenerator] = None,
        paste_mode: Literal["residual", "replace"] = "residual",
        detection_box_mode: Literal["max", "mean"] = "max",
    ):
        super().__init__()
        profile = profile or ModelProfile()
        self.scale = scale
        self.prior_scales = tuple(sorted(prior_scales))
        self.detection_box_mode = detection_box_mode
        self.encoder = TextEncoder(num_codes, profile)
        self.generator = generator or StructureGenerator(num_codes, profile, self.prior_scales)
        bc = profile.backbone_channels
        sc = profile.sr_channels
        self.lr_height = HR_HEIGHT // scale

        self.lr_branch = ConvBlock(3, sc[self.lr_height])
        self.up3 = UpBlock(bc[4], bc[3], sc[32])
        self.up2 = UpBlock(sc[32], bc[2], sc[32])
        self.up1 = UpBlock(sc[32], bc[1], sc[32])
        lr32 = sc[32] if self.lr_height == 32 else 0
        lr64 = sc[64] if self.lr_height == 64 else 0
        self.up0 = UpBlock(sc[32], bc[0] + lr32, sc[32])
        self.up64 = UpBlock(sc[32], lr64, sc[64])
        self.up128 = UpBlock(sc[64], 0, sc[128])
        self.transforms = nn.ModuleDict(
            {str(s): PriorTransform(s, sc[s], self.generator.feature_channels(s), paste_mode) for s in self.prior_scales}
        )
        self.recon = nn.Sequential(
            nn.Conv2d(sc[128], sc[128], 3, padding=1),
            nn.ReLU(inplace=True),
            *[ResBlock(sc[128]) for _ in range(profile.recon_blocks)],
            nn.Conv2d(sc[128], 3, 3, padding=1),
        )

    def prior_parameters(self) -> List[nn.Parameter]:
        return list(self.generator.parameters())

    def main_parameters(self) -> List[nn.Parameter]:
        prior_ids = {id(p) for p in self.generator.parameters()}
        return [p for p in self.parameters() if id(p) not in prior_ids]

    def detect(self, encoded: EncoderOutput) -> Tuple[Guidance, List[List[CharacterDetection]]]:
        """Predicted guidance; detections whose boxes collapse after clipping are dropped."""
        codes, boxes, kept_detections = [], [], []
        for b in range(encoded.logits.shape[0]):
            kept, kept_boxes = [], []
            for det in select_detections(encoded.image(b), self.detection_box_mode):
                xyxy = cxcywh_to_xyxy(torch.tensor(det.box))
                if float(xyxy[2] - xyxy[0]) < MIN_BOX_EXTENT or float(xyxy[3] - xyxy[1]) < MIN_BOX_EXTENT:
                    logger.debug(f"Dropping degenerate detection at timestep {det.timestep}")
                    continue
                kept.append(det)
                kept_boxes.append(xyxy)
            codes.append(torch.tensor([d.code_index for d in kept], dtype=torch.long))
            boxes.append(torch.stack(kept_boxes) if kept_boxes else torch.zeros(0, 4))
            kept_detections.append(kept)
        return Guidance(codes=codes, boxes=boxes), kept_detections

    def _inject(self, scale: int, feature: torch.Tensor, guidance: Guidance, priors: Optional[PriorBundle], char_image: torch.Tensor) -> torch.Tensor:
        if priors is None or str(scale) not in self.transforms:
            return feature
        transform = self.transforms[str(scale)]
        rows = []
        for b in range(feature.shape[0]):
            idx = (char_image == b).nonzero(as_tuple=True)[0]
            fmap = feature[b : b + 1]
            if idx.numel():
                boxes = guidance.boxes[b].to(device=feature.device, dtype=feature.dtype)
                fmap = transform(fmap, priors.features[scale][idx], boxes)
            rows.append(fmap)
        return torch.cat(rows, dim=0)

    def forward(self, lr: torch.Tensor, guidance: Optional[Guidance] = None) -> SROutput:
        """`guidance` boxes are normalized to the LR width times scale; None means use predicted detections."""
        if lr.shape[2] != self.lr_height:
            raise GeometryError(f"LR height must be {self.lr_height} for x{self.scale}, got {lr.shape[2]}")
        target_w = lr.shape[3] * self.scale
        # ingest width (lr_w * scale / 4) must itself be a multiple of 4
        pad = -lr.shape[3] % (16 // self.scale)
        if pad:
            lr = F.pad(lr, (0, pad))
        encoded = self.encoder(ingest_lr(lr))
        detections: List[List[CharacterDetection]] = []
        if guidance is None:
            guidance, detections = self.detect(encoded)

        counts = [int(c.numel()) for c in guidance.codes]
        char_image = torch.repeat_interleave(torch.arange(len(counts)), torch.tensor(counts, dtype=torch.long)).to(lr.device)
        priors = None
        if char_image.numel():
            codes = torch.cat([c.to(lr.device) for c in guidance.codes])
            priors = self.generator(codes, encoded.w[char_image])

        p = encoded.pyramid
        _, _, h32, w32 = p[0].shape
        lr_feat = self.lr_branch(lr)
        d = self.up3(p[4], p[3].shape[-2:], [p[3]])
        d = self.up2(d, p[2].shape[-2:], [p[2]])
        d = self.up1(d, p[1].shape[-2:], [p[1]])
        d = self.up0(d, (h32, w32), [p[0], lr_feat] if self.lr_height == 32 else [p[0]])
        d = self._inject(32, d, guidance, priors, char_image)
        d = self.up64(d, (h32 * 2, w32 * 2), [lr_feat] if self.lr_height == 64 else [])
        d = self._inject(64, d, guidance, priors, char_image)
        d = self.up128(d, (h32 * 4, w32 * 4))
        base = F.interpolate(lr, scale_factor=self.scale, mode="bicubic", align_corners=False)
        sr = (self.recon(d) + base).clamp(0.0, 1.0)
        return SROutput(
            sr=sr[..., :target_w],
            encoder=encoded,
            guidance=guidance,
            priors=priors,
            char_image=char_image,
            detections=detections,
        )


@dataclass
class InferenceResult:
    sr_image: np.ndarray
    text: List[int]
    boxes: List[Tuple[float, float, float, float]]
    confidences: List[float]
    structures: List[np.ndarray]
    priors: Optional[PriorBundle]


@torch.no_grad()
def super_resolve(lr_image: np.ndarray, model: StructurePriorSR, device: str = "cpu") -> InferenceResult:
    """Super-resolve one H x W x 3 LR image in [0, 1]; boxes are reported in SR pixels."""
    model.eval()
    lr = torch.from_numpy(np.ascontiguousarray(lr_image.transpose(2, 0, 1))).float()[None].to(device)
    out = model(lr)
    structures = []
    if out.priors is not None:
        structures = [s[0].cpu().numpy() for s in out.priors.structure]
    padded_w = out.encoder.num_timesteps * 16
    scale = torch.tensor([padded_w, HR_HEIGHT, padded_w, HR_HEIGHT], dtype=torch.float64)
    return InferenceResult(
        sr_image=out.sr[0].cpu().numpy().transpose(1, 2, 0),
        text=out.guidance.codes[0].tolist(),
        boxes=[tuple(float(v) for v in b.double() * scale) for b in out.guidance.boxes[0]],
        confidences=[d.confidence for d in out.detections[0]],
        structures=structures,
        priors=out.priors,
    )
