"""Image quality and recognition metrics plus the evaluation report."""

import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.signal import convolve2d

from src.errors import MetricInputError

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricInputError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1], capped at 100."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM of the luminance channel (Gaussian 11x11, sigma 1.5, valid region)."""
    a, b = _pair(a, b)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise MetricInputError(f"SSIM needs images of at least {SSIM_WINDOW} pixels per side, got {x.shape}")
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    win = gaussian_window()

    def filt(img: np.ndarray) -> np.ndarray:
        return convolve2d(img, win, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x**2
    sigma_y = filt(y * y) - mu_y**2
    sigma_xy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sigma_x + sigma_y + c2)
    return float(np.mean(num / den))


def seq_accuracy(decoded: Sequence[str], ground_truth: Sequence[str]) -> float:
    if len(decoded) != len(ground_truth):
        raise MetricInputError(f"{len(decoded)} decoded texts for {len(ground_truth)} ground-truth texts")
    if not decoded:
        raise MetricInputError("Sequence accuracy of an empty set is undefined")
    return sum(p == g for p, g in zip(decoded, ground_truth)) / len(decoded)


class SampleMetrics(BaseModel):
    id: int
    psnr: float
    ssim: float
    text_gt: str
    text_pred: str
    correct: bool
    rec_loss: Optional[float] = None


class MetricsReport(BaseModel):
    psnr_mean: float
    ssim_mean: float
    seq_accuracy: float = Field(ge=0.0, le=1.0)
    rec_loss_mean: Optional[float] = None
    num_samples: int
    checkpoint: Optional[str] = None
    manifest: Optional[str] = None
    timestamp: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    rows: List[SampleMetrics] = []

    @classmethod
    def from_rows(cls, rows: Sequence[SampleMetrics], **kwargs) -> "MetricsReport":
        if not rows:
            raise MetricInputError("No samples to report on")
        losses = [r.rec_loss for r in rows if r.rec_loss is not None]
        return cls(
            psnr_mean=float(np.mean([r.psnr for r in rows])),
            ssim_mean=float(np.mean([r.ssim for r in rows])),
            seq_accuracy=seq_accuracy([r.text_pred for r in rows], [r.text_gt for r in rows]),
            rec_loss_mean=float(np.mean(losses)) if losses else None,
            num_samples=len(rows),
            rows=list(rows),
            **kwargs,
        )

    def summary(self) -> dict:
        return self.model_dump(exclude={"rows"})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows])

    def write(self, json_path: str, csv_path: Optional[str] = None) -> None:
        Path(json_path).parent.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.model_dump(), fh, indent=2, sort_keys=True)
        if csv_path:
            self.to_frame().to_csv(csv_path, index=False)
        logger.info(
            f"PSNR {self.psnr_mean:.2f} dB, SSIM {self.ssim_mean:.4f}, "
            f"accuracy {self.seq_accuracy:.3f} over {self.num_samples} samples"
        )
