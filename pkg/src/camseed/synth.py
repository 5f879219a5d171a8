"""Deterministic synthetic dataset generator.

Produces grayscale slices with one smooth elliptical target per positive
slice (plus background clutter on every slice), matching binary masks, and
mock multi-resolution feature exports whose gradient-weighted activation
maps recover blurred target evidence at each block resolution.

Construction of the mock exports, per block m (resolution size / 2^m):

* evidence = the target mask area-downsampled to the block grid and blurred
  with a depth-growing sigma (deep maps are smooth and complete but coarse);
* shallow and middle blocks are dispersive: their target interior is
  modulated by a random texture that drags much of it to mid strength,
  while their background stays confidently dark - mirroring how
  shallow-layer activation maps fire on fragments rather than filled
  objects;
* the same blocks also carry the slice's clutter sites: flat-topped bumps
  pinned at mid strength (~0.5 after peak normalization) at off-target
  locations shared across those blocks, absent from the deep blocks;
* four feature channels and matching gradient grids are arranged so that
  the gradient-weighted channel combination reproduces that target map.

Entropy weighting then reassembles the complementary confident regions:
the deep blocks anchor the filled interior, the shallow blocks' confident
background vetoes the clutter, and every mid-strength value (fragmented
interiors, clutter tops, blurred rims) is discounted. Plain averaging
instead drags the interior down toward the clutter level, and the deepest
map alone is the blurriest. That reproduces the expected quality ordering
of the three fusion modes without hand-placing any results.

Everything is driven by one sequentially-consumed RNG, so regeneration
with the same seed is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fusion import upsample_bilinear
from .gridio import write_array

# per-block constants, shallow to deep
CLUTTER_LEVEL = (0.62, 0.58, 0.55, 0.0, 0.0)
TEXTURE_FLOOR = (0.28, 0.40, 0.55, 1.0, 1.0)
EVIDENCE_BLUR_SIGMA = (0.7, 0.8, 0.9, 1.0, 1.1)
CONTRAST = 0.55
GAP_DEPTH = 0.55
GAP_WIDTH_RAD = 0.35


def _smooth_field(rng, size: int, cells: int, amplitude: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, (cells, cells))
    return amplitude * upsample_bilinear(coarse, size, size)


def _bump(size: int, center, sigma: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-(((rr - center[0]) ** 2) + ((cc - center[1]) ** 2)) / (2.0 * sigma**2))


def _area_downsample(values: np.ndarray, factor: int) -> np.ndarray:
    h, w = values.shape
    return values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def _ellipse_fields(rng, size: int):
    """Radial field rho (<=1 inside the target), angle around the center,
    and a contrast multiplier that opens a low-contrast gap in one boundary
    sector (so intensity cues alone cannot segment the target perfectly)."""
    center = rng.uniform(0.34, 0.66, 2) * size
    axes = rng.uniform(0.14, 0.23, 2) * size
    theta = rng.uniform(0.0, np.pi)
    gap_angle = rng.uniform(-np.pi, np.pi)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    u = rr - center[0]
    v = cc - center[1]
    x = u * np.cos(theta) + v * np.sin(theta)
    y = -u * np.sin(theta) + v * np.cos(theta)
    rho = np.sqrt((x / axes[0]) ** 2 + (y / axes[1]) ** 2)
    angle = np.arctan2(v, u)
    diff = np.angle(np.exp(1j * (angle - gap_angle)))
    gap = 1.0 - GAP_DEPTH * np.exp(-(diff**2) / (2.0 * GAP_WIDTH_RAD**2))
    return rho, gap


def _clutter(rng, size: int, n_lo: int, n_hi: int, amp_lo: float, amp_hi: float) -> np.ndarray:
    field = np.zeros((size, size))
    for _ in range(int(rng.integers(n_lo, n_hi + 1))):
        center = rng.uniform(0.0, size, 2)
        sigma = rng.uniform(0.04, 0.09) * size
        amp = rng.uniform(amp_lo, amp_hi) * (1.0 if rng.uniform() < 0.5 else -1.0)
        field += amp * _bump(size, center, sigma)
    return field


def _make_slice(rng, size: int, positive: bool):
    """Return (image, mask, rho) for one slice; rho is None on negatives."""
    background = 0.22 + _smooth_field(rng, size, 8, 0.03)
    clutter = _clutter(rng, size, 1, 3, 0.08, 0.16)
    noise = rng.normal(0.0, 0.004, (size, size))
    if positive:
        rho, gap = _ellipse_fields(rng, size)
        mask = (rho <= 1.0).astype(np.uint8)
        profile = 1.0 / (1.0 + np.exp((rho - 1.0) / 0.06))
        image = background + CONTRAST * gap * profile + clutter + noise
    else:
        rho = None
        mask = np.zeros((size, size), dtype=np.uint8)
        image = background + clutter + noise
    return np.clip(image, 0.0, 1.0), mask, rho


def _sample_distractors(rng, size: int, rho: np.ndarray):
    """Per-slice clutter sites shared by all blocks: centers well off the
    target (radial field > 1.35), with a per-site width and strength."""
    sites = []
    n = int(rng.integers(3, 6))
    while len(sites) < n:
        center = rng.uniform(0.0, size, 2)
        if rho[int(center[0]), int(center[1])] > 1.35:
            sites.append((center, rng.uniform(3.0, 5.0), rng.uniform(0.92, 1.08)))
    return sites


def _make_block_export(rng, mask: np.ndarray, distractors, block_index: int, size: int):
    """Mock features/gradients whose gradient-weighted combination is a
    depth-appropriate view of the target plus shared mid-strength clutter."""
    factor = 2**block_index
    bs = size // factor
    depth = min(block_index, len(CLUTTER_LEVEL) - 1)
    coverage = _area_downsample(mask.astype(np.float64), factor)
    evidence = gaussian_filter(coverage, sigma=EVIDENCE_BLUR_SIGMA[depth])
    peak = evidence.max()
    if peak > 0:
        evidence = evidence / peak

    floor = TEXTURE_FLOOR[depth]
    if floor < 1.0:
        texture = np.abs(gaussian_filter(rng.normal(0.0, 1.0, (bs, bs)), sigma=1.0))
        texture = np.clip(texture / 0.6, 0.0, 1.0)
        evidence = evidence * (floor + (1.0 - floor) * texture)

    level = CLUTTER_LEVEL[depth]
    bumps = np.zeros((bs, bs))
    if level > 0:
        for center, sigma_px, strength in distractors:
            shape = np.minimum(1.0, 1.8 * _bump(bs, center / factor, max(sigma_px / factor, 0.8)))
            bumps = np.maximum(bumps, level * strength * shape)
        bumps *= coverage < 0.02  # clutter lives off-target
    target_cam = np.maximum(evidence, bumps)

    rr, cc = np.mgrid[0:bs, 0:bs].astype(np.float64)
    mid = (bs - 1) / 2.0
    vignette = np.sqrt(((rr - mid) ** 2 + (cc - mid) ** 2)) / max(mid, 1.0)
    distractor = np.abs(rng.normal(0.0, 1.0, (bs, bs)))

    features = np.stack([
        target_cam * 2.0,
        distractor,
        target_cam * 1.0,
        vignette,
    ])
    gradients = np.stack([
        np.full((bs, bs), 0.5) + rng.normal(0.0, 0.01, (bs, bs)),
        rng.normal(0.0, 0.05, (bs, bs)),
        np.full((bs, bs), 0.25) + rng.normal(0.0, 0.01, (bs, bs)),
        np.full((bs, bs), -0.02) + rng.normal(0.0, 0.01, (bs, bs)),
    ])
    class_score = float(rng.uniform(2.0, 6.0))
    return features.astype(np.float32), gradients.astype(np.float32), class_score


def _volume_splits(n_volumes: int):
    if n_volumes == 1:
        return ["validation"]
    if n_volumes == 2:
        return ["validation", "test"]
    n_val = max(1, n_volumes // 5)
    n_test = max(1, n_volumes // 5)
    n_train = n_volumes - n_val - n_test
    return ["train"] * n_train + ["validation"] * n_val + ["test"] * n_test


def generate_dataset(
    out_dir,
    seed: int,
    count: int,
    size: int = 64,
    max_block_index: int = 4,
    slices_per_volume: int = 5,
) -> Path:
    """Write ``count`` slices (alternating positive/negative), masks,
    per-block feature exports for positives, and the manifest. Returns the
    manifest path. Fully deterministic per seed."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size % (2**max_block_index) != 0:
        raise ValueError(f"size {size} must be divisible by 2^{max_block_index}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    (out_dir / "exports").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    n_volumes = (count + slices_per_volume - 1) // slices_per_volume
    splits = _volume_splits(n_volumes)
    entries = []
    for i in range(count):
        slice_id = f"s{i:04d}"
        volume = i // slices_per_volume
        positive = i % 2 == 0
        image, mask, rho = _make_slice(rng, size, positive)
        write_array(image.astype(np.float32), out_dir / "images" / f"{slice_id}.npy")
        write_array(mask, out_dir / "masks" / f"{slice_id}.npy")
        entry = {
            "slice_id": slice_id,
            "volume_id": f"vol{volume:03d}",
            "split": splits[volume],
            "label": "positive" if positive else "negative",
            "image_path": f"images/{slice_id}.npy",
            "ground_truth_path": f"masks/{slice_id}.npy",
        }
        if positive:
            distractors = _sample_distractors(rng, size, rho)
            refs = []
            for m in range(max_block_index + 1):
                features, gradients, score = _make_block_export(rng, mask, distractors, m, size)
                feat_rel = f"exports/{slice_id}_b{m}_feat.npy"
                grad_rel = f"exports/{slice_id}_b{m}_grad.npy"
                write_array(features, out_dir / feat_rel)
                write_array(gradients, out_dir / grad_rel)
                refs.append({
                    "block_index": m,
                    "features": feat_rel,
                    "gradients": grad_rel,
                    "class_score": round(score, 6),
                })
            entry["feature_export_paths"] = refs
        entries.append(entry)

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps({"entries": entries}, indent=2, sort_keys=True) + "\n")
    return manifest_path
