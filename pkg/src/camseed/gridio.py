"""Array and dataset I/O for the pseudo-label pipeline.

The exchange format is deliberately minimal: one NPY v1.0 array per file
(little-endian IEEE floats, C order) plus a JSON manifest that ties slices,
ground-truth masks and per-block feature exports together. Any framework
that can dump a float array to NPY can feed the pipeline without conversion.

Maps are plain 2D numpy arrays (``float32`` or ``float64``); feature and
gradient stacks are 3D arrays with shape ``(channels, height, width)``.
Shape always travels with the data - there is no bare-buffer API.
"""

from __future__ import annotations

import ast
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
SUPPORTED_DESCRS = ("<f4", "<f8")
VALID_LABELS = ("positive", "negative")
VALID_SPLITS = ("train", "validation", "test")


class ArrayFormatError(ValueError):
    """A file violates the NPY exchange contract."""


class ManifestError(ValueError):
    """A dataset manifest violates its schema."""


def read_array(path: Union[str, Path]) -> np.ndarray:
    """Read a 2D map or a 3D channel stack from an NPY v1.0 file.

    Only little-endian 4/8-byte IEEE floats in C order are accepted; the
    payload must be entirely finite. Errors carry the offending path and,
    for bad payload values, the byte offset of the first offender.
    """
    path = Path(path)
    if not path.is_file():
        raise ArrayFormatError(f"{path}: file not found")
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:6] != NPY_MAGIC:
        raise ArrayFormatError(f"{path}: not an NPY file (bad magic at offset 0)")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise ArrayFormatError(f"{path}: unsupported NPY version {major}.{minor}")
    (header_len,) = struct.unpack("<H", raw[8:10])
    data_start = 10 + header_len
    if len(raw) < data_start:
        raise ArrayFormatError(f"{path}: truncated header (expected {header_len} bytes)")
    try:
        header = ast.literal_eval(raw[10:data_start].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise ArrayFormatError(f"{path}: malformed header dict at offset 10: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise ArrayFormatError(f"{path}: malformed header dict: keys {sorted(header)}")
    descr = header["descr"]
    if descr not in SUPPORTED_DESCRS:
        raise ArrayFormatError(
            f"{path}: unsupported dtype {descr!r} (expected one of {SUPPORTED_DESCRS})"
        )
    if header["fortran_order"]:
        raise ArrayFormatError(f"{path}: Fortran-order arrays are rejected, store C order")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 1 for s in shape):
        raise ArrayFormatError(f"{path}: malformed shape {shape!r}")
    if len(shape) not in (2, 3):
        raise ArrayFormatError(f"{path}: expected a 2D map or 3D stack, got shape {shape}")
    dtype = np.dtype(descr)
    count = int(np.prod(shape))
    expected = data_start + count * dtype.itemsize
    if len(raw) != expected:
        raise ArrayFormatError(
            f"{path}: payload size mismatch ({len(raw)} bytes, expected {expected})"
        )
    values = np.frombuffer(raw, dtype=dtype, offset=data_start).reshape(shape)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        offset = data_start + int(bad[0]) * dtype.itemsize
        raise ArrayFormatError(f"{path}: non-finite value at byte offset {offset}")
    return values.copy()


def write_array(values: np.ndarray, path: Union[str, Path]) -> None:
    """Write a map, mask or stack as NPY v1.0.

    Integer/bool inputs (masks) and float32 data are stored as 4-byte floats;
    float64 input keeps its width so that a write/read round trip is
    bit-exact.
    """
    values = np.asarray(values)
    if values.ndim not in (2, 3):
        raise ArrayFormatError(f"cannot write array of shape {values.shape}: need 2D or 3D")
    if values.size == 0:
        raise ArrayFormatError("cannot write an empty array")
    out = values if values.dtype == np.float64 else values.astype(np.float32)
    if not np.isfinite(out).all():
        raise ArrayFormatError("refusing to write non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, np.ascontiguousarray(out), version=(1, 0))


def as_binary_mask(values: np.ndarray) -> np.ndarray:
    """Validate a {0,1}-valued 2D grid and return it as uint8."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {values.shape}")
    if not np.isin(values, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return values.astype(np.uint8)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    """Read a binary mask stored as a 0.0/1.0 float grid."""
    return as_binary_mask(read_array(path))


@dataclass(frozen=True)
class FeatureBlockExport:
    """Per-block classifier export: features plus class-score gradients.

    ``features`` and ``gradients`` are ``(K, h, w)`` stacks of identical
    shape; ``class_score`` is the scalar network output the gradients were
    taken from (metadata only).
    """

    block_index: int
    features: np.ndarray
    gradients: np.ndarray
    class_score: float = 0.0

    def __post_init__(self):
        if self.block_index < 0:
            raise ValueError(f"block_index must be >= 0, got {self.block_index}")
        f, g = np.asarray(self.features), np.asarray(self.gradients)
        if f.ndim != 3 or f.shape[0] < 1:
            raise ValueError(f"features must be (K, h, w) with K >= 1, got {f.shape}")
        if f.shape != g.shape:
            raise ValueError(f"feature/gradient shape mismatch: {f.shape} vs {g.shape}")
        if not (np.isfinite(f).all() and np.isfinite(g).all()):
            raise ValueError("feature export contains non-finite values")

    @property
    def channels(self) -> int:
        return int(self.features.shape[0])

    @property
    def block_shape(self) -> tuple:
        return tuple(self.features.shape[1:])


def load_feature_block(
    features_path: Union[str, Path],
    gradients_path: Union[str, Path],
    block_index: int,
    class_score: float = 0.0,
) -> FeatureBlockExport:
    """Assemble a FeatureBlockExport from its feature and gradient files."""
    features = read_array(features_path)
    gradients = read_array(gradients_path)
    if features.ndim != 3:
        raise ArrayFormatError(f"{features_path}: expected a 3D stack, got {features.shape}")
    return FeatureBlockExport(
        block_index=block_index,
        features=features,
        gradients=gradients,
        class_score=class_score,
    )


@dataclass(frozen=True)
class FeatureExportRef:
    """Manifest pointer to one block's feature/gradient files."""

    block_index: int
    features_path: Path
    gradients_path: Path
    class_score: float = 0.0

    def load(self) -> FeatureBlockExport:
        return load_feature_block(
            self.features_path, self.gradients_path, self.block_index, self.class_score
        )


@dataclass(frozen=True)
class ManifestEntry:
    slice_id: str
    volume_id: str
    image_path: Path
    label: str
    split: str = "train"
    ground_truth_path: Optional[Path] = None
    feature_export_paths: tuple = ()

    @property
    def is_positive(self) -> bool:
        return self.label == "positive"


@dataclass(frozen=True)
class DatasetManifest:
    """Validated dataset manifest; all paths already resolved to the manifest dir."""

    entries: tuple
    root: Path

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def positives(self) -> list:
        return [e for e in self.entries if e.is_positive]

    def by_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]


def _require(condition: bool, message: str):
    if not condition:
        raise ManifestError(message)


def _entry_path(root: Path, value, slice_id: str, what: str) -> Path:
    _require(isinstance(value, str) and value.strip() != "",
             f"entry {slice_id!r}: {what} must be a non-empty path string")
    return root / value


def load_manifest(path: Union[str, Path], require_ground_truth: bool = False) -> DatasetManifest:
    """Load and validate a JSON dataset manifest.

    Paths are resolved relative to the manifest's directory. When
    ``require_ground_truth`` is set (evaluation mode), every positive entry
    must carry a ground_truth_path.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    _require(isinstance(doc, dict) and isinstance(doc.get("entries"), list),
             f"{path}: manifest must be an object with an 'entries' list")
    root = path.parent
    entries = []
    seen = set()
    for i, raw in enumerate(doc["entries"]):
        _require(isinstance(raw, dict), f"{path}: entry {i} is not an object")
        slice_id = raw.get("slice_id")
        _require(isinstance(slice_id, str) and slice_id != "",
                 f"{path}: entry {i} missing slice_id")
        _require(slice_id not in seen, f"{path}: duplicate slice_id {slice_id!r}")
        seen.add(slice_id)
        label = raw.get("label")
        _require(label in VALID_LABELS,
                 f"entry {slice_id!r}: label must be one of {VALID_LABELS}, got {label!r}")
        split = raw.get("split", "train")
        _require(split in VALID_SPLITS,
                 f"entry {slice_id!r}: split must be one of {VALID_SPLITS}, got {split!r}")
        volume_id = raw.get("volume_id", slice_id)
        _require(isinstance(volume_id, str) and volume_id != "",
                 f"entry {slice_id!r}: volume_id must be a non-empty string")
        image_path = _entry_path(root, raw.get("image_path"), slice_id, "image_path")
        gt = raw.get("ground_truth_path")
        gt_path = _entry_path(root, gt, slice_id, "ground_truth_path") if gt is not None else None
        if require_ground_truth and label == "positive":
            _require(gt_path is not None,
                     f"entry {slice_id!r}: positive entry used for evaluation "
                     "has no ground_truth_path")
        exports = []
        for j, ref in enumerate(raw.get("feature_export_paths", [])):
            _require(isinstance(ref, dict),
                     f"entry {slice_id!r}: feature export {j} is not an object")
            block = ref.get("block_index")
            _require(isinstance(block, int) and block >= 0,
                     f"entry {slice_id!r}: feature export {j} needs integer block_index >= 0")
            exports.append(FeatureExportRef(
                block_index=block,
                features_path=_entry_path(root, ref.get("features"), slice_id, "features"),
                gradients_path=_entry_path(root, ref.get("gradients"), slice_id, "gradients"),
                class_score=float(ref.get("class_score", 0.0)),
            ))
        exports.sort(key=lambda r: r.block_index)
        entries.append(ManifestEntry(
            slice_id=slice_id,
            volume_id=volume_id,
            image_path=image_path,
            label=label,
            split=split,
            ground_truth_path=gt_path,
            feature_export_paths=tuple(exports),
        ))
    return DatasetManifest(entries=tuple(entries), root=root)
