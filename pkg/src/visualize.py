"""Image grids: style-interpolation strips of structure images and LR/SR/HR contact sheets."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from src.priorgan import StructureGenerator, interpolate_w

logger = logging.getLogger(__name__)


def _rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.clip(img, 0.0, 1.0)


def image_grid(images: Sequence[np.ndarray], rows: int, cols: int, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Row-major grid; cells are sized to the largest image and images are top-left aligned."""
    if len(images) > rows * cols:
        raise ValueError(f"{len(images)} images do not fit a {rows}x{cols} grid")
    cells = [_rgb(img) for img in images]
    cell_h = max(c.shape[0] for c in cells)
    cell_w = max(c.shape[1] for c in cells)
    grid = np.full((rows * cell_h + (rows + 1) * pad, cols * cell_w + (cols + 1) * pad, 3), fill, dtype=np.float32)
    for i, cell in enumerate(cells):
        r, c = divmod(i, cols)
        top = pad + r * (cell_h + pad)
        left = pad + c * (cell_w + pad)
        grid[top : top + cell.shape[0], left : left + cell.shape[1]] = cell
    return grid


def save_png(image: np.ndarray, path: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(_rgb(image) * 255.0).astype(np.uint8), mode="RGB").save(path)
    return path


@torch.no_grad()
def interpolation_strip(
    generator: StructureGenerator, code: int, steps: int, seed: int = 0, w1: Optional[torch.Tensor] = None, w2: Optional[torch.Tensor] = None
) -> List[np.ndarray]:
    """Structure images of one character along a straight line between two styles."""
    device = generator.codebook.table.device
    if w1 is None or w2 is None:
        gen = torch.Generator().manual_seed(seed)
        w = generator.map_latent(torch.randn(2, generator.z_dim, generator=gen).to(device))
        w1, w2 = w[0:1], w[1:2]
    ws = torch.cat(interpolate_w(w1, w2, steps))
    codes = torch.full((steps,), int(code), dtype=torch.long, device=device)
    structure = generator(codes, ws).structure
    return [s[0].cpu().numpy() for s in structure]


def contact_sheet(lr: np.ndarray, sr: np.ndarray, hr: Optional[np.ndarray] = None, pad: int = 2) -> np.ndarray:
    """Rows: LR (nearest-upscaled to the SR size), SR and, when given, HR."""
    h, w = sr.shape[:2]
    lr_img = Image.fromarray(np.round(_rgb(lr) * 255.0).astype(np.uint8)).resize((w, h), Image.NEAREST)
    rows = [np.asarray(lr_img, dtype=np.float32) / 255.0, sr]
    if hr is not None:
        rows.append(hr)
    return image_grid(rows, len(rows), 1, pad=pad)
