"""Training and export routines.

Everything runs on CPU at toy scale. Results are deterministic for a fixed
seed up to framework scheduling; the achieved metrics are recorded in the
emitted reports rather than assumed.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SliceRecord, load_image, load_records, save_array, split_records
from .models import TapClassifier, TinySegmenter

ACCURACY_GATE = 0.95
SUPERVISION_LAMBDA = {
    "grad_cam_only": 1.0,
    "um_cam": 1.0,
    "spl": 0.0,
    "um_cam_plus_spl": None,  # taken from the --lambda flag
}


class GateError(RuntimeError):
    """Classifier quality gate failed; exports are refused."""


def _stack_images(records) -> torch.Tensor:
    arrays = [load_image(r) for r in records]
    return torch.from_numpy(np.stack(arrays)[:, None, :, :])


def _labels(records) -> torch.Tensor:
    return torch.tensor([1.0 if r.positive else 0.0 for r in records])


def _accuracy(model, images, labels) -> float:
    model.eval()
    with torch.no_grad():
        logits = model(images)
        predicted = (torch.sigmoid(logits) > 0.5).float()
    return float((predicted == labels).float().mean())


def train_classifier(manifest_path, out_dir, seed: int = 0, epochs: int = 30,
                     batch_size: int = 16, lr: float = 1e-3) -> dict:
    """Train the tap classifier on the train split and gate it on the
    validation split; returns the written report."""
    torch.manual_seed(seed)
    records = load_records(manifest_path)
    train = split_records(records, "train") or split_records(records, "validation")
    holdout = split_records(records, "validation") or train
    images = _stack_images(train)
    labels = _labels(train)
    val_images = _stack_images(holdout)
    val_labels = _labels(holdout)

    model = TapClassifier()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=generator)
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            logits = model(images[idx])
            loss = F.binary_cross_entropy_with_logits(logits, labels[idx])
            loss.backward()
            optimizer.step()

    accuracy = _accuracy(model, val_images, val_labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "accuracy": accuracy, "seed": seed,
                "epochs": epochs}, out_dir / "classifier.pt")
    report = {
        "accuracy": accuracy,
        "n_train": len(train),
        "n_holdout": len(holdout),
        "epochs": epochs,
        "seed": seed,
        "gate": ACCURACY_GATE,
        "gate_passed": accuracy >= ACCURACY_GATE,
    }
    (out_dir / "classifier_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def _relative(path: Path, base: Path) -> str:
    return Path(os.path.relpath(path, base)).as_posix()


def export_features(checkpoint_path, manifest_path, out_dir) -> Path:
    """Export per-block features and class-score gradients for every
    positive slice, plus a manifest wired to them. The class score is the
    pre-sigmoid logit; that choice is recorded in the export report."""
    checkpoint = torch.load(checkpoint_path, weights_only=True)
    if checkpoint["accuracy"] < ACCURACY_GATE:
        raise GateError(
            f"classifier accuracy {checkpoint['accuracy']:.3f} is below the "
            f"{ACCURACY_GATE} gate; refusing to export activation maps"
        )
    model = TapClassifier()
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()

    out_dir = Path(out_dir)
    (out_dir / "exports").mkdir(parents=True, exist_ok=True)
    records = load_records(manifest_path)
    entries = []
    exported = 0
    for record in records:
        entry = dict(record.raw)
        entry["image_path"] = _relative(record.image_path, out_dir)
        if record.ground_truth_path is not None:
            entry["ground_truth_path"] = _relative(record.ground_truth_path, out_dir)
        entry.pop("feature_export_paths", None)
        if record.positive:
            entry["feature_export_paths"] = _export_slice(model, record, out_dir)
            exported += 1
        entries.append(entry)

    manifest_out = out_dir / "manifest.json"
    manifest_out.write_text(json.dumps({"entries": entries}, indent=2, sort_keys=True) + "\n")
    (out_dir / "export_report.json").write_text(json.dumps({
        "n_exported": exported,
        "blocks": len(model.blocks),
        "class_score_kind": "logit",
        "classifier_accuracy": checkpoint["accuracy"],
    }, indent=2, sort_keys=True))
    return manifest_out


def _export_slice(model, record: SliceRecord, out_dir: Path) -> list:
    image = torch.from_numpy(load_image(record)[None, None, :, :])
    logit, taps = model.forward_with_taps(image)
    for tap in taps:
        tap.retain_grad()
    model.zero_grad()
    logit.backward(torch.ones_like(logit))
    refs = []
    for m, tap in enumerate(taps):
        features = tap.detach()[0].numpy()
        gradients = tap.grad[0].numpy()
        feat_rel = f"exports/{record.slice_id}_b{m}_feat.npy"
        grad_rel = f"exports/{record.slice_id}_b{m}_grad.npy"
        save_array(features, out_dir / feat_rel)
        save_array(gradients, out_dir / grad_rel)
        refs.append({
            "block_index": m,
            "features": feat_rel,
            "gradients": grad_rel,
            "class_score": round(float(logit.item()), 6),
        })
    return refs


def _load_target(directory, sub: str, slice_id: str) -> np.ndarray:
    path = Path(directory) / sub / f"{slice_id}.npy"
    if not path.is_file():
        raise FileNotFoundError(f"missing supervision map {path}")
    return np.load(path).astype(np.float32)


def train_segmenter(manifest_path, out_dir, mode: str, um_dir=None, spl_dir=None,
                    lam: float = 0.1, seed: int = 0, epochs: int = 40,
                    batch_size: int = 8, lr: float = 2e-3) -> dict:
    """Train the toy segmenter with the requested supervision mix and write
    binarized predictions for every manifest slice into out_dir."""
    if mode not in SUPERVISION_LAMBDA:
        raise ValueError(f"mode must be one of {sorted(SUPERVISION_LAMBDA)}, got {mode!r}")
    effective_lam = SUPERVISION_LAMBDA[mode]
    if effective_lam is None:
        effective_lam = lam
    if effective_lam > 0.0 and um_dir is None:
        raise ValueError(f"mode {mode!r} needs --um-dir")
    if effective_lam < 1.0 and spl_dir is None:
        raise ValueError(f"mode {mode!r} needs --spl-dir")

    torch.manual_seed(seed)
    records = load_records(manifest_path)
    train = split_records(records, "train") or records
    images = _stack_images(train)
    um_targets = spl_targets = None
    if effective_lam > 0.0:
        um_targets = torch.from_numpy(np.stack(
            [_load_target(um_dir, "um_cam", r.slice_id) for r in train]))
    if effective_lam < 1.0:
        spl_targets = torch.from_numpy(np.stack(
            [_load_target(spl_dir, "spl_target", r.slice_id) for r in train]))

    model = TinySegmenter()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    model.train()
    last_loss = float("nan")
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=generator)
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            pred = model(images[idx]).clamp(1e-6, 1.0 - 1e-6)
            loss = 0.0
            if um_targets is not None:
                loss = loss + effective_lam * F.binary_cross_entropy(pred, um_targets[idx])
            if spl_targets is not None:
                loss = loss + (1.0 - effective_lam) * F.binary_cross_entropy(pred, spl_targets[idx])
            loss.backward()
            optimizer.step()
            last_loss = float(loss.detach())

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        for record in records:
            image = torch.from_numpy(load_image(record)[None, None, :, :])
            pred = (model(image)[0].numpy() > 0.5).astype(np.float32)
            save_array(pred, out_dir / f"{record.slice_id}.npy")
    report = {
        "mode": mode,
        "lambda": effective_lam,
        "epochs": epochs,
        "seed": seed,
        "n_train": len(train),
        "final_loss": last_loss,
        "n_predictions": len(records),
    }
    (out_dir / "segmenter_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
