"""
Tests for dataset writing, manifest validation and batching.
"""

import json

import pytest
import torch

from src.config import DegradationConfig
from src.dataset import (
    ManifestDataset,
    SyntheticTextDataset,
    pad_collate,
    read_manifest,
    write_dataset,
)
from src.errors import ManifestError
from src.textgen import synthesize_sample


@pytest.fixture
def written(tmp_path, charset, fonts):
    samples = [synthesize_sample(i, 0, charset, fonts) for i in range(3)]
    path = write_dataset(samples, str(tmp_path / "data"), 0, charset, scale=4, degradation=DegradationConfig.disabled())
    return path


def _rewrite(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_written_manifest_reads_back(written, charset):
    manifest = read_manifest(str(written), charset=charset)
    assert [r.id for r in manifest.records] == [0, 1, 2]
    assert manifest.charset_hash == charset.hash
    item = ManifestDataset(manifest)[0]
    assert item["hr"].shape[1] == 128
    assert item["lr"].shape[1] == 32
    assert item["boxes"].shape == (len(item["text"]), 4)


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError):
        read_manifest(str(tmp_path / "absent.jsonl"))


def test_empty_manifest_reports_line_one(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ManifestError) as info:
        read_manifest(str(path))
    assert info.value.line == 1


def test_malformed_record_reports_its_line(written):
    lines = written.read_text(encoding="utf-8").splitlines()
    lines[2] = "{not json"
    _rewrite(written, lines)
    with pytest.raises(ManifestError) as info:
        read_manifest(str(written))
    assert info.value.line == 3
    assert "line 3" in str(info.value)


def test_duplicate_ids_are_rejected(written):
    lines = written.read_text(encoding="utf-8").splitlines()
    _rewrite(written, lines + [lines[1]])
    with pytest.raises(ManifestError) as info:
        read_manifest(str(written))
    assert info.value.line == 5


def test_length_mismatch_is_rejected(written):
    lines = written.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[1])
    record["boxes"] = record["boxes"][:-1] if len(record["boxes"]) > 1 else []
    lines[1] = json.dumps(record)
    _rewrite(written, lines)
    with pytest.raises(ManifestError) as info:
        read_manifest(str(written))
    assert info.value.line == 2


def test_missing_image_is_rejected(written):
    manifest = read_manifest(str(written))
    manifest.resolve(manifest.records[1].hr_path).unlink()
    with pytest.raises(ManifestError) as info:
        read_manifest(str(written))
    assert info.value.line == 3
    read_manifest(str(written), check_files=False)


def test_out_of_charset_index_is_rejected(written, charset):
    lines = written.read_text(encoding="utf-8").splitlines()
    record = json.loads(lines[1])
    record["text"][0] = charset.M
    lines[1] = json.dumps(record)
    _rewrite(written, lines)
    with pytest.raises(ManifestError):
        read_manifest(str(written), charset=charset)


def test_synthetic_items_are_reproducible(charset, fonts):
    ds = SyntheticTextDataset(4, 1, charset, fonts, scale=4)
    a, b = ds[2], ds[2]
    assert torch.equal(a["lr"], b["lr"])
    assert a["lr"].shape[1] * 4 == a["hr"].shape[1]


def test_pad_collate_pads_and_normalizes(charset, fonts):
    ds = SyntheticTextDataset(3, 2, charset, fonts, scale=4)
    items = [ds[i] for i in range(3)]
    batch = pad_collate(items)
    width = batch["hr"].shape[3]
    assert width % 32 == 0
    assert width == max(it["hr"].shape[2] for it in items)
    assert batch["lr"].shape[3] * 4 == width
    for boxes in batch["boxes"]:
        assert boxes.min() >= 0.0 and boxes.max() <= 1.0
