"""Manifest and array access for the adapter.

The adapter talks to the pseudo-label toolkit purely through its file
contract: NPY arrays plus a JSON manifest with slice entries. This module
re-implements just enough of that contract (it deliberately does not import
the toolkit package).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SliceRecord:
    slice_id: str
    volume_id: str
    split: str
    label: str
    image_path: Path
    ground_truth_path: Optional[Path]
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def positive(self) -> bool:
        return self.label == "positive"


def load_records(manifest_path) -> list:
    """Read manifest entries, resolving paths against the manifest's dir."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    records = []
    for entry in doc["entries"]:
        gt = entry.get("ground_truth_path")
        records.append(SliceRecord(
            slice_id=entry["slice_id"],
            volume_id=entry.get("volume_id", entry["slice_id"]),
            split=entry.get("split", "train"),
            label=entry["label"],
            image_path=root / entry["image_path"],
            ground_truth_path=root / gt if gt else None,
            raw=dict(entry),
        ))
    return records


def load_image(record: SliceRecord) -> np.ndarray:
    image = np.load(record.image_path)
    if image.ndim != 2:
        raise ValueError(f"{record.image_path}: expected a 2D image, got {image.shape}")
    return image.astype(np.float32)


def save_array(values: np.ndarray, path) -> None:
    """Write a float32 C-order NPY v1.0 file (the exchange format)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.ascontiguousarray(values, dtype=np.float32))


def split_records(records, split: str) -> list:
    return [r for r in records if r.split == split]
