"""
Blind degradation of HR text images into LR inputs.

Every random choice is written into a DegradationRecord first and the LR image is
produced by replaying that record, so `replay(hr, record)` is bit-exact by
construction. Images are H x W x 3 arrays in [0, 1]; all arithmetic runs in
float64.
"""

import logging
from dataclasses import dataclass
from typing import Annotated, List, Literal, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field
from scipy import fft, ndimage

from src.config import DegradationConfig
from src.errors import DegradationError

logger = logging.getLogger(__name__)

ResizeMethod = Literal["nearest", "bilinear", "bicubic"]

# ITU-T T.81 Annex K quantization tables
LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

_RGB_TO_YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


class BlurOp(BaseModel):
    op: Literal["blur"] = "blur"
    kernel_size: int
    sigma_x: float
    sigma_y: float
    angle: float = 0.0


class ResizeOp(BaseModel):
    op: Literal["resize"] = "resize"
    out_h: int
    out_w: int
    method: ResizeMethod = "bicubic"


class NoiseOp(BaseModel):
    op: Literal["noise"] = "noise"
    sigma: float
    seed: int


class JpegOp(BaseModel):
    op: Literal["jpeg"] = "jpeg"
    quality: int


class ColorJitterOp(BaseModel):
    op: Literal["color_jitter"] = "color_jitter"
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


DegradationOp = Annotated[Union[BlurOp, ResizeOp, NoiseOp, JpegOp, ColorJitterOp], Field(discriminator="op")]


class DegradationRecord(BaseModel):
    scale: int
    seed: int
    chain_style: Literal["fixed", "shuffle"] = "fixed"
    ops: List[DegradationOp] = Field(default_factory=list)


@dataclass
class DegradedPair:
    lr_image: np.ndarray
    hr_image: np.ndarray
    record: DegradationRecord
    hr_ref: Optional[int] = None


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


def gaussian_kernel(kernel_size: int, sigma_x: float, sigma_y: float, angle: float = 0.0) -> np.ndarray:
    """Normalized (possibly anisotropic) Gaussian; `angle` rotates the covariance."""
    if kernel_size % 2 == 0:
        raise DegradationError(f"Blur kernel size must be odd, got {kernel_size}")
    if not 3 <= kernel_size <= 21:
        raise DegradationError(f"Blur kernel size must be within 3..21, got {kernel_size}")
    if sigma_x <= 0 or sigma_y <= 0:
        raise DegradationError(f"Blur sigmas must be positive, got ({sigma_x}, {sigma_y})")
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    precision = rot @ np.diag([1.0 / sigma_x**2, 1.0 / sigma_y**2]) @ rot.T
    r = kernel_size // 2
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    quad = precision[0, 0] * xs**2 + 2 * precision[0, 1] * xs * ys + precision[1, 1] * ys**2
    k = np.exp(-0.5 * quad)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, kernel_size: int, sigma_x: float, sigma_y: float, angle: float = 0.0) -> np.ndarray:
    k = gaussian_kernel(kernel_size, sigma_x, sigma_y, angle)
    img = np.asarray(img, dtype=np.float64)
    return ndimage.convolve(img, k[:, :, None], mode="reflect")


def resize(img: np.ndarray, out_h: int, out_w: int, method: ResizeMethod = "bicubic") -> np.ndarray:
    """Resize with half-pixel centers (align_corners=False); antialiased when shrinking. Not clipped."""
    if out_h < 1 or out_w < 1:
        raise DegradationError(f"Resize target must be at least 1x1, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    x = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1)))[None]
    if method == "nearest":
        y = F.interpolate(x, size=(out_h, out_w), mode="nearest")
    else:
        shrinking = out_h < h or out_w < w
        y = F.interpolate(x, size=(out_h, out_w), mode=method, align_corners=False, antialias=shrinking)
    return y[0].numpy().transpose(1, 2, 0).copy()


def gaussian_noise(shape: Tuple[int, ...], sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise DegradationError(f"Noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return np.zeros(shape, dtype=np.float64)
    return rng.normal(0.0, sigma, size=shape)


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.clip(img + gaussian_noise(img.shape, sigma, rng), 0.0, 1.0)


def quantization_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a base table."""
    if not 1 <= quality <= 100:
        raise DegradationError(f"Compression quality must be within 1..100, got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.maximum(np.floor((base * s + 50.0) / 100.0), 1.0)


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(plane - 128.0, ((0, ph), (0, pw)), mode="edge")
    bh, bw = padded.shape[0] // 8, padded.shape[1] // 8
    blocks = padded.reshape(bh, 8, bw, 8).transpose(0, 2, 1, 3)
    coef = fft.dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    blocks = fft.idctn(coef, axes=(2, 3), norm="ortho")
    out = blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)
    return out[:h, :w] + 128.0


def compress(img: np.ndarray, quality: int) -> np.ndarray:
    """JPEG-style 8x8 block DCT quantization in YCbCr (no chroma subsampling), rounded to 8 bit."""
    luma = quantization_table(LUMA_TABLE, quality)
    chroma = quantization_table(CHROMA_TABLE, quality)
    rgb = np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0)
    ycc = rgb @ _RGB_TO_YCC.T
    ycc[..., 1:] += 128.0
    planes = [_quantize_plane(ycc[..., 0], luma)]
    planes += [_quantize_plane(ycc[..., c], chroma) for c in (1, 2)]
    ycc = np.stack(planes, axis=-1)
    ycc[..., 1:] -= 128.0
    rgb = np.clip(np.round(ycc @ _YCC_TO_RGB.T), 0.0, 255.0)
    return rgb / 255.0


def apply_color_jitter(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0, saturation: float = 1.0) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64) * brightness
    img = np.clip(img, 0.0, 1.0)
    gray = img @ np.array([0.299, 0.587, 0.114])
    img = np.clip((img - gray.mean()) * contrast + gray.mean(), 0.0, 1.0)
    gray = (img @ np.array([0.299, 0.587, 0.114]))[..., None]
    return np.clip((img - gray) * saturation + gray, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------


def _apply_op(img: np.ndarray, op: DegradationOp) -> np.ndarray:
    if isinstance(op, BlurOp):
        return np.clip(gaussian_blur(img, op.kernel_size, op.sigma_x, op.sigma_y, op.angle), 0.0, 1.0)
    if isinstance(op, ResizeOp):
        return np.clip(resize(img, op.out_h, op.out_w, op.method), 0.0, 1.0)
    if isinstance(op, NoiseOp):
        return add_gaussian_noise(img, op.sigma, np.random.default_rng(op.seed))
    if isinstance(op, JpegOp):
        return compress(img, op.quality)
    if isinstance(op, ColorJitterOp):
        return apply_color_jitter(img, op.brightness, op.contrast, op.saturation)
    raise DegradationError(f"Unknown degradation operator {op!r}")


def _check_divisible(shape: Tuple[int, ...], scale: int) -> None:
    h, w = shape[:2]
    if h % scale or w % scale:
        raise DegradationError(f"HR size {h}x{w} is not divisible by scale {scale}")


def apply_record(hr_image: np.ndarray, record: DegradationRecord) -> Tuple[np.ndarray, np.ndarray]:
    """Replay a record; returns (lr, hr_target). hr_target carries any color jitter."""
    _check_divisible(hr_image.shape, record.scale)
    img = np.asarray(hr_image, dtype=np.float64)
    target = img
    for op in record.ops:
        img = _apply_op(img, op)
        if isinstance(op, ColorJitterOp):
            target = img
    h, w = hr_image.shape[:2]
    if img.shape[:2] != (h // record.scale, w // record.scale):
        raise DegradationError(f"Record does not end at {h // record.scale}x{w // record.scale}: got {img.shape[:2]}")
    return img.astype(np.float32), target.astype(np.float32)


def replay(hr_image: np.ndarray, record: DegradationRecord) -> np.ndarray:
    return apply_record(hr_image, record)[0]


def sample_record(hr_shape: Tuple[int, ...], scale: int, config: DegradationConfig, seed: int) -> DegradationRecord:
    """Draw every operator parameter for one sample from `seed`."""
    _check_divisible(hr_shape, scale)
    rng = np.random.default_rng(seed)
    h, w = hr_shape[:2]
    th, tw = h // scale, w // scale

    style = config.chain_style
    if style == "random":
        style = "fixed" if rng.random() < 0.5 else "shuffle"

    ops: List[DegradationOp] = []
    if rng.random() < config.color_jitter_prob:
        ops.append(
            ColorJitterOp(
                brightness=float(rng.uniform(1 - config.brightness, 1 + config.brightness)),
                contrast=float(rng.uniform(1 - config.contrast, 1 + config.contrast)),
                saturation=float(rng.uniform(1 - config.saturation, 1 + config.saturation)),
            )
        )

    core: List[DegradationOp] = []
    if rng.random() < config.blur_prob:
        lo, hi = config.kernel_size_range
        kernel_size = int(rng.integers(lo // 2, hi // 2 + 1)) * 2 + 1
        sigma_x = float(rng.uniform(*config.sigma_range))
        if rng.random() < config.anisotropic_prob:
            sigma_y = float(rng.uniform(*config.sigma_range))
            angle = float(rng.uniform(0.0, np.pi))
        else:
            sigma_y, angle = sigma_x, 0.0
        core.append(BlurOp(kernel_size=kernel_size, sigma_x=sigma_x, sigma_y=sigma_y, angle=angle))
    if rng.random() < config.resize_prob:
        factor = float(rng.uniform(*config.resize_factor_range))
        method = config.resize_methods[int(rng.integers(0, len(config.resize_methods)))]
        core.append(ResizeOp(out_h=max(1, round(th * factor)), out_w=max(1, round(tw * factor)), method=method))
    if rng.random() < config.noise_prob:
        core.append(NoiseOp(sigma=float(rng.uniform(*config.noise_sigma_range)), seed=int(rng.integers(0, 2**31))))
    if rng.random() < config.jpeg_prob:
        lo, hi = config.quality_range
        core.append(JpegOp(quality=int(rng.integers(lo, hi + 1))))

    if style == "shuffle":
        core = [core[i] for i in rng.permutation(len(core))]
    ops.extend(core)
    ops.append(ResizeOp(out_h=th, out_w=tw, method="bicubic"))
    return DegradationRecord(scale=scale, seed=seed, chain_style=style, ops=ops)


def degrade(
    hr_image: np.ndarray,
    scale: int,
    config: Optional[DegradationConfig] = None,
    rng: Optional[np.random.Generator] = None,
    hr_ref: Optional[int] = None,
) -> DegradedPair:
    config = config or DegradationConfig()
    rng = rng or np.random.default_rng()
    record = sample_record(hr_image.shape, scale, config, int(rng.integers(0, 2**31)))
    lr, target = apply_record(hr_image, record)
    logger.debug(f"Degraded sample {hr_ref} with {[op.op for op in record.ops]}")
    return DegradedPair(lr_image=lr, hr_image=target, record=record, hr_ref=hr_ref)
