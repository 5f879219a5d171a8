"""End-to-end pipeline stages over a dataset manifest.

Each stage is a plain function that consumes/produces files in the exchange
format, so the command-line layer stays a thin argument parser. Per-slice
problems are collected instead of aborting the run; callers translate them
into the summary exit code.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .fusion import (
    FusionConfig,
    binarize,
    fuse_um_cam,
    grad_cam,
    grid_search_threshold,
    normalize_max,
    upsample_bilinear,
)
from .geodesic import GeodesicConfig, build_spl, extract_seeds, spl_to_soft_target
from .gridio import DatasetManifest, ManifestEntry, read_array, read_mask, write_array
from .losses import LossConfig, joint_loss
from .metrics import EvalReport, evaluate_cohort


class ConfigError(ValueError):
    """Bad run configuration (vs. a per-slice data problem)."""


NEGATIVE_POLICIES = ("all_background", "skip")
SUPERVISION_MODES = ("grad_cam_only", "um_cam", "spl", "um_cam_plus_spl")


@dataclass(frozen=True)
class PipelineConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    geodesic: GeodesicConfig = field(default_factory=GeodesicConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    supervision_mode: str = "um_cam_plus_spl"
    negative_slice_policy: str = "all_background"
    threshold: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if self.negative_slice_policy not in NEGATIVE_POLICIES:
            raise ConfigError(
                f"negative_slice_policy must be one of {NEGATIVE_POLICIES}, "
                f"got {self.negative_slice_policy!r}"
            )
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ConfigError(
                f"supervision_mode must be one of {SUPERVISION_MODES}, "
                f"got {self.supervision_mode!r}"
            )
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass
class StageResult:
    written: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def _parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def fused_map_for_entry(entry: ManifestEntry, config: PipelineConfig) -> np.ndarray:
    """Load one positive slice's exports and fuse them at image resolution."""
    image = read_array(entry.image_path)
    if image.ndim != 2:
        raise ValueError(f"{entry.image_path}: expected a 2D image")
    expected = config.fusion.stack_size
    refs = entry.feature_export_paths
    if len(refs) != expected:
        raise ValueError(f"need {expected} feature exports, found {len(refs)}")
    stack = []
    for ref in refs:
        export = ref.load()
        bh, bw = export.block_shape
        if bh > image.shape[0] or bw > image.shape[1]:
            raise ValueError(
                f"block {ref.block_index} resolution {bh}x{bw} exceeds image "
                f"{image.shape[0]}x{image.shape[1]}"
            )
        cam = grad_cam(export)
        cam = upsample_bilinear(cam, image.shape[0], image.shape[1])
        stack.append(normalize_max(cam))
    return fuse_um_cam(stack, config.fusion)


def run_fuse(manifest: DatasetManifest, out_dir, config: PipelineConfig) -> StageResult:
    """Write one fused activation map per slice into out/um_cam, then pick
    the binarization threshold on the validation positives (grid search),
    unless an override threshold is configured."""
    out_dir = Path(out_dir)
    maps_dir = out_dir / "um_cam"
    maps_dir.mkdir(parents=True, exist_ok=True)
    result = StageResult()

    def process(entry: ManifestEntry):
        target = maps_dir / f"{entry.slice_id}.npy"
        if entry.is_positive:
            fused = fused_map_for_entry(entry, config)
            write_array(fused.astype(np.float32), target)
            return entry.slice_id, str(target), None, False
        if config.negative_slice_policy == "skip":
            return entry.slice_id, None, "negative slice skipped by policy", False
        image = read_array(entry.image_path)
        write_array(np.zeros(image.shape, dtype=np.float32), target)
        return entry.slice_id, str(target), None, False

    def safe(entry):
        try:
            return process(entry)
        except Exception as exc:  # per-slice isolation: one bad slice must not kill the run
            return entry.slice_id, None, str(exc), True

    for slice_id, path, note, failed in _parallel_map(safe, list(manifest), config.workers):
        if path is not None:
            result.written[slice_id] = path
        elif failed:
            result.failures[slice_id] = note
        else:
            result.skipped[slice_id] = note

    val_maps, val_truths = [], []
    for entry in manifest:
        if (
            entry.is_positive
            and entry.split == "validation"
            and entry.ground_truth_path is not None
            and entry.slice_id in result.written
        ):
            val_maps.append(read_array(result.written[entry.slice_id]))
            val_truths.append(read_mask(entry.ground_truth_path))

    if config.threshold is not None:
        threshold_doc = {"threshold": config.threshold, "mean_dsc": None,
                         "n_validation": 0, "source": "override"}
    elif val_maps:
        threshold, mean_dsc = grid_search_threshold(val_maps, val_truths)
        threshold_doc = {"threshold": threshold, "mean_dsc": mean_dsc,
                         "n_validation": len(val_maps), "source": "grid_search"}
    else:
        threshold_doc = {"threshold": None, "mean_dsc": None,
                         "n_validation": 0, "source": "unavailable"}
    threshold_doc["fusion_mode"] = config.fusion.fusion_mode
    _write_json(out_dir / "threshold.json", threshold_doc)
    _write_json(out_dir / "fuse_report.json", {
        "written": sorted(result.written),
        "skipped": result.skipped,
        "failures": result.failures,
    })
    result.extra["threshold"] = threshold_doc
    return result


def _resolve_threshold(maps_dir: Path, config: PipelineConfig) -> float:
    if config.threshold is not None:
        return config.threshold
    threshold_file = maps_dir / "threshold.json"
    if threshold_file.is_file():
        doc = json.loads(threshold_file.read_text())
        if doc.get("threshold") is not None:
            return float(doc["threshold"])
    raise ConfigError(
        f"no binarization threshold: none recorded in {threshold_file} and no override given"
    )


def run_spl(manifest: DatasetManifest, maps_dir, out_dir, config: PipelineConfig) -> StageResult:
    """Binarize fused maps, extract seeds, and write the seed-derived cue
    maps, the combined soft target, and the binarized pseudo mask."""
    maps_dir = Path(maps_dir)
    out_dir = Path(out_dir)
    threshold = _resolve_threshold(maps_dir, config)
    for sub in ("spl_fg", "spl_bg", "spl_target", "pseudo_mask"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    result = StageResult()

    def write_all(slice_id, fg, bg, target, mask):
        write_array(fg.astype(np.float32), out_dir / "spl_fg" / f"{slice_id}.npy")
        write_array(bg.astype(np.float32), out_dir / "spl_bg" / f"{slice_id}.npy")
        write_array(target.astype(np.float32), out_dir / "spl_target" / f"{slice_id}.npy")
        write_array(mask, out_dir / "pseudo_mask" / f"{slice_id}.npy")
        return str(out_dir / "spl_target" / f"{slice_id}.npy")

    def process(entry: ManifestEntry):
        sid = entry.slice_id
        if not entry.is_positive:
            if config.negative_slice_policy == "skip":
                return sid, None, "negative slice skipped by policy", False
            image = read_array(entry.image_path)
            zeros = np.zeros(image.shape)
            path = write_all(sid, zeros, np.ones(image.shape), zeros,
                             np.zeros(image.shape, dtype=np.uint8))
            return sid, path, None, False
        fused_path = maps_dir / "um_cam" / f"{sid}.npy"
        fused = read_array(fused_path)
        mask = binarize(fused, threshold)
        if mask.sum() == 0:
            return sid, None, f"no pixels above threshold {threshold}", False
        image = read_array(entry.image_path)
        if image.shape != mask.shape:
            raise ValueError(f"image {image.shape} vs fused map {mask.shape} shape mismatch")
        try:
            seeds = extract_seeds(mask, config.geodesic)
        except ValueError as exc:
            return sid, None, f"seed extraction degenerate: {exc}", False
        label = build_spl(image, seeds, config.geodesic)
        target = spl_to_soft_target(label)
        path = write_all(sid, label.foreground_map, label.background_map, target, mask)
        return sid, path, None, False

    def safe(entry):
        try:
            return process(entry)
        except Exception as exc:
            return entry.slice_id, None, str(exc), True

    for sid, path, note, failed in _parallel_map(safe, list(manifest), config.workers):
        if path is not None:
            result.written[sid] = path
        elif failed:
            result.failures[sid] = note
        else:
            result.skipped[sid] = note

    _write_json(out_dir / "spl_report.json", {
        "threshold": threshold,
        "alpha": config.geodesic.alpha,
        "solver": config.geodesic.solver,
        "written": sorted(result.written),
        "skipped": result.skipped,
        "failures": result.failures,
    })
    result.extra["threshold"] = threshold
    return result


def run_eval(
    manifest: DatasetManifest,
    predictions_dir,
    mode: str = "per_slice_2d",
    spacing_3d=(1.0, 1.0, 7.0),
    report_path=None,
) -> tuple:
    """Compare predictions_dir/<slice_id>.npy masks against ground truth.

    2D mode scores each positive slice; 3D mode stacks every slice of a
    volume in manifest order (negative slices contribute all-background
    truth). Returns (EvalReport, failures dict).
    """
    predictions_dir = Path(predictions_dir)
    failures: dict = {}
    triples = []
    if mode == "per_slice_2d":
        for entry in manifest.positives():
            try:
                pred = read_mask(predictions_dir / f"{entry.slice_id}.npy")
                truth = read_mask(entry.ground_truth_path)
                triples.append((pred, truth, entry.slice_id))
            except Exception as exc:
                failures[entry.slice_id] = str(exc)
    elif mode == "per_volume_3d":
        dropped = set()
        volume_triples: dict = {}
        for entry in manifest:
            vid = entry.volume_id
            if vid in dropped:
                continue
            try:
                pred = read_mask(predictions_dir / f"{entry.slice_id}.npy")
                if entry.ground_truth_path is not None:
                    truth = read_mask(entry.ground_truth_path)
                elif not entry.is_positive:
                    truth = np.zeros(pred.shape, dtype=np.uint8)
                else:
                    raise ValueError("positive slice without ground truth")
                volume_triples.setdefault(vid, []).append((pred, truth))
            except Exception as exc:
                failures[vid] = f"{entry.slice_id}: {exc}"
                dropped.add(vid)
                volume_triples.pop(vid, None)
        for vid, pairs in volume_triples.items():
            triples.extend((p, t, vid) for p, t in pairs)
    else:
        raise ConfigError(f"unknown eval mode {mode!r}")

    if not triples:
        raise ConfigError("nothing to evaluate: no usable prediction/truth pairs")
    report = evaluate_cohort(triples, mode=mode, spacing_3d=spacing_3d)
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(report.to_json() + "\n")
    return report, failures


def run_loss_eval(pred_path, um_cam_path, spl_path, config: LossConfig) -> dict:
    """Evaluate the joint objective on a (prediction, fused map, seed
    target) file triple."""
    pred = read_array(pred_path)
    um = read_array(um_cam_path)
    spl = read_array(spl_path)
    total, ce_um, ce_spl = joint_loss(pred, um, spl, config)
    return {
        "total": total,
        "ce_um": ce_um,
        "ce_spl": ce_spl,
        "lambda": config.lam,
    }
