"""
Dataset persistence and loading.

A dataset directory holds HR/LR PNGs, structure-mask PNGs and a JSON-Lines
manifest. The first manifest line is a header; every following line is one
ManifestRecord. Paths inside records are relative to the manifest's directory.
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, Field, ValidationError
from torch.utils.data import Dataset
from tqdm import tqdm

from src.config import DegradationConfig, RenderConfig
from src.degrade import DegradationRecord, apply_record, degrade
from src.errors import ManifestError
from src.textgen import Charset, GlyphFont, TextSample, synthesize_sample

logger = logging.getLogger(__name__)

MANIFEST_FORMAT = "glyphprior-manifest"
MANIFEST_VERSION = 1


class ManifestHeader(BaseModel):
    format: Literal["glyphprior-manifest"] = MANIFEST_FORMAT
    version: int = MANIFEST_VERSION
    global_seed: int
    charset_hash: Optional[str] = None


class ManifestRecord(BaseModel):
    id: int
    hr_path: str
    lr_path: Optional[str] = None
    text: List[int]
    boxes: List[Tuple[int, int, int, int]]
    structure_paths: List[str]
    font_id: int
    scale: Optional[int] = None
    degradation_record: Optional[DegradationRecord] = None
    render_params: Dict = Field(default_factory=dict)


class DatasetManifest(BaseModel):
    global_seed: int
    charset_hash: Optional[str] = None
    records: List[ManifestRecord] = Field(default_factory=list)
    root: str = "."

    def resolve(self, relative: str) -> Path:
        return Path(self.root) / relative


# ---------------------------------------------------------------------------
# Image IO
# ---------------------------------------------------------------------------


def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------


def write_manifest(
    records: Sequence[ManifestRecord],
    path: str,
    global_seed: int,
    charset_hash: Optional[str] = None,
) -> Path:
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("Record ids must be unique")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ManifestHeader(global_seed=global_seed, charset_hash=charset_hash)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header.model_dump_json() + "\n")
        for record in records:
            fh.write(record.model_dump_json() + "\n")
    return path


def read_manifest(path: str, check_files: bool = True, charset: Optional[Charset] = None) -> DatasetManifest:
    """Parse a manifest; errors name the 1-based line that failed."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"Manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ManifestError("Manifest is empty (missing header)", line=1)

    def parse(line_no: int, text: str, model):
        try:
            return model.model_validate(json.loads(text))
        except json.JSONDecodeError as e:
            raise ManifestError(f"Malformed JSON: {e.msg}", line=line_no) from e
        except ValidationError as e:
            raise ManifestError(f"Invalid {model.__name__}: {e.errors()[0]['msg']}", line=line_no) from e

    header = parse(1, lines[0], ManifestHeader)
    manifest = DatasetManifest(global_seed=header.global_seed, charset_hash=header.charset_hash, root=str(path.parent))
    seen = set()
    for line_no, text in enumerate(lines[1:], start=2):
        record = parse(line_no, text, ManifestRecord)
        if record.id in seen:
            raise ManifestError(f"Duplicate record id {record.id}", line=line_no)
        seen.add(record.id)
        if len(record.boxes) != len(record.text) or len(record.structure_paths) != len(record.text):
            raise ManifestError("text, boxes and structure_paths lengths differ", line=line_no)
        if charset is not None and any(not 0 <= i < charset.M for i in record.text):
            raise ManifestError(f"Record {record.id} has a text index outside the charset", line=line_no)
        if check_files:
            for rel in [record.hr_path, record.lr_path, *record.structure_paths]:
                if rel is not None and not manifest.resolve(rel).is_file():
                    raise ManifestError(f"Referenced file does not exist: {rel}", line=line_no)
        manifest.records.append(record)
    return manifest


def write_dataset(
    samples: Sequence[TextSample],
    out_dir: str,
    global_seed: int,
    charset: Charset,
    scale: Optional[int] = None,
    degradation: Optional[DegradationConfig] = None,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Write PNGs for every sample (plus degraded LR when `scale` is set) and the manifest."""
    root = Path(out_dir)
    for sub in ("hr", "lr", "structure"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(tqdm(samples, desc="Writing samples", disable=None)):
        sid = sample.sample_id if sample.sample_id is not None else i
        hr_rel = f"hr/{sid:06d}.png"
        save_image(sample.hr_image, root / hr_rel)
        structure_paths = []
        for k, mask in enumerate(sample.structure_images):
            rel = f"structure/{sid:06d}_{k:02d}.png"
            save_mask(mask, root / rel)
            structure_paths.append(rel)
        lr_rel, record = None, None
        if scale is not None:
            rng = np.random.default_rng(np.random.SeedSequence([global_seed, sid, scale]))
            pair = degrade(sample.hr_image, scale, degradation, rng, hr_ref=sid)
            lr_rel, record = f"lr/{sid:06d}.png", pair.record
            save_image(pair.lr_image, root / lr_rel)
        records.append(
            ManifestRecord(
                id=sid,
                hr_path=hr_rel,
                lr_path=lr_rel,
                text=sample.text,
                boxes=sample.boxes,
                structure_paths=structure_paths,
                font_id=sample.font_id,
                scale=scale,
                degradation_record=record,
                render_params=sample.render_params,
            )
        )
    path = write_manifest(records, str(root / manifest_name), global_seed, charset.hash)
    logger.info(f"Wrote {len(records)} samples to {path}")
    return path


# ---------------------------------------------------------------------------
# Torch datasets
# ---------------------------------------------------------------------------


def _item(
    hr: np.ndarray,
    lr: np.ndarray,
    text: Sequence[int],
    boxes: Sequence[Tuple[int, int, int, int]],
    structures: np.ndarray,
    sample_id: int,
) -> Dict:
    return {
        "id": sample_id,
        "hr": torch.from_numpy(np.ascontiguousarray(hr.transpose(2, 0, 1))).float(),
        "lr": torch.from_numpy(np.ascontiguousarray(lr.transpose(2, 0, 1))).float(),
        "text": torch.tensor(list(text), dtype=torch.long),
        "boxes": torch.tensor(list(boxes), dtype=torch.float32).reshape(-1, 4),
        "structures": torch.from_numpy(np.asarray(structures, dtype=np.float32)),
    }


class SyntheticTextDataset(Dataset):
    """On-the-fly samples with online degradation; item i is fixed by (seed, i)."""

    def __init__(
        self,
        length: int,
        global_seed: int,
        charset: Charset,
        fonts: Sequence[GlyphFont],
        scale: int,
        corpus: Optional[Sequence[str]] = None,
        render: Optional[RenderConfig] = None,
        degradation: Optional[DegradationConfig] = None,
        offset: int = 0,
    ):
        self.length = length
        self.global_seed = global_seed
        self.charset = charset
        self.fonts = list(fonts)
        self.scale = scale
        self.corpus = corpus
        self.render = render or RenderConfig()
        self.degradation = degradation or DegradationConfig()
        self.offset = offset

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> Dict:
        sid = self.offset + index
        sample = synthesize_sample(sid, self.global_seed, self.charset, self.fonts, self.corpus, self.render)
        rng = np.random.default_rng(np.random.SeedSequence([self.global_seed, sid, self.scale]))
        pair = degrade(sample.hr_image, self.scale, self.degradation, rng, hr_ref=sid)
        return _item(pair.hr_image, pair.lr_image, sample.text, sample.boxes, sample.structure_images, sid)


class ManifestDataset(Dataset):
    """Samples from a written dataset; LR comes from disk or a replayed record."""

    def __init__(self, manifest: DatasetManifest, scale: Optional[int] = None, degradation: Optional[DegradationConfig] = None):
        self.manifest = manifest
        self.scale = scale
        self.degradation = degradation or DegradationConfig()

    def __len__(self) -> int:
        return len(self.manifest.records)

    def __getitem__(self, index: int) -> Dict:
        record = self.manifest.records[index]
        hr = load_image(self.manifest.resolve(record.hr_path))
        structures = np.stack([load_mask(self.manifest.resolve(p)) for p in record.structure_paths])
        if record.lr_path is not None and (self.scale is None or self.scale == record.scale):
            lr = load_image(self.manifest.resolve(record.lr_path))
            if record.degradation_record is not None:
                hr = apply_record(hr, record.degradation_record)[1]
        else:
            scale = self.scale or record.scale
            if scale is None:
                raise ManifestError(f"Record {record.id} has no LR image and no scale was given")
            rng = np.random.default_rng(np.random.SeedSequence([self.manifest.global_seed, record.id, scale]))
            pair = degrade(hr, scale, self.degradation, rng, hr_ref=record.id)
            hr, lr = pair.hr_image, pair.lr_image
        return _item(hr, lr, record.text, record.boxes, structures, record.id)


def pad_collate(items: List[Dict], width_multiple: int = 32) -> Dict:
    """Zero-pad widths to the batch max; boxes are normalized to the padded HR width."""
    scale = items[0]["hr"].shape[1] // items[0]["lr"].shape[1]
    hr_w = max(it["hr"].shape[2] for it in items)
    hr_w = int(math.ceil(hr_w / width_multiple) * width_multiple)
    hr_h = items[0]["hr"].shape[1]
    hr = torch.zeros(len(items), 3, hr_h, hr_w)
    lr = torch.zeros(len(items), 3, hr_h // scale, hr_w // scale)
    boxes = []
    for b, it in enumerate(items):
        hr[b, :, :, : it["hr"].shape[2]] = it["hr"]
        lr[b, :, :, : it["lr"].shape[2]] = it["lr"]
        norm = it["boxes"].clone()
        norm[:, 0::2] /= hr_w
        norm[:, 1::2] /= hr_h
        boxes.append(norm)
    return {
        "id": [it["id"] for it in items],
        "hr": hr,
        "lr": lr,
        "text": [it["text"] for it in items],
        "boxes": boxes,
        "structures": [it["structures"] for it in items],
    }
