"""Activation-map computation and multi-resolution fusion.

Builds gradient-weighted activation maps from exported feature/gradient
stacks, brings them to image resolution, and fuses them either by a
per-pixel entropy weighting (uncertain pixels are discounted) or by plain
averaging. Also owns binarization and the grid search for the threshold
that maximizes mean Dice against reference masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from .gridio import FeatureBlockExport
from .metrics import dsc

FUSION_MODES = ("um_cam", "average_cam", "last_layer_only")
THRESHOLD_GRID = np.arange(100) / 100.0


@dataclass(frozen=True)
class FusionConfig:
    """Fusion settings. ``max_block_index`` is the highest block index, so a
    stack holds M+1 maps. Entropy weights always use log base 2 so they
    land exactly in [0, 1]."""

    max_block_index: int = 4
    fusion_mode: str = "um_cam"

    def __post_init__(self):
        if self.max_block_index < 0:
            raise ValueError(f"max_block_index must be >= 0, got {self.max_block_index}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")

    @property
    def stack_size(self) -> int:
        return self.max_block_index + 1


def grad_cam(export: FeatureBlockExport) -> np.ndarray:
    """Gradient-weighted activation map at block resolution.

    Each channel weight is the mean of that channel's gradient grid; the
    map is the ReLU of the weighted channel combination, so values are >= 0.
    """
    features = np.asarray(export.features, dtype=np.float64)
    gradients = np.asarray(export.gradients, dtype=np.float64)
    if features.shape != gradients.shape:
        raise ValueError(f"feature/gradient shape mismatch: {features.shape} vs {gradients.shape}")
    alphas = gradients.mean(axis=(1, 2))
    cam = np.tensordot(alphas, features, axes=(0, 0))
    return np.maximum(cam, 0.0)


def upsample_bilinear(values: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear resample with pixel-center alignment and edge clamping.

    The source coordinate for target pixel (r, c) is
    ((r + 0.5) * h_src / h_tgt - 0.5, (c + 0.5) * w_src / w_tgt - 0.5),
    clamped into the source domain; no overshoot beyond the input range.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2D map, got shape {values.shape}")
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be >= 1, got {(target_h, target_w)}")
    src_h, src_w = values.shape
    rows = np.clip((np.arange(target_h) + 0.5) * (src_h / target_h) - 0.5, 0.0, src_h - 1.0)
    cols = np.clip((np.arange(target_w) + 0.5) * (src_w / target_w) - 0.5, 0.0, src_w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, src_h - 1)
    c1 = np.minimum(c0 + 1, src_w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    v00 = values[np.ix_(r0, c0)]
    v01 = values[np.ix_(r0, c1)]
    v10 = values[np.ix_(r1, c0)]
    v11 = values[np.ix_(r1, c1)]
    return (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11)


def normalize_max(values: np.ndarray) -> np.ndarray:
    """Divide a non-negative map by its maximum; an all-zero map is returned
    unchanged (a map with no evidence stays that way)."""
    values = np.asarray(values, dtype=np.float64)
    if (values < 0).any():
        raise ValueError("normalize_max expects non-negative values")
    peak = values.max() if values.size else 0.0
    if peak == 0.0:
        return values.copy()
    return values / peak


def entropy_weight(values: np.ndarray) -> np.ndarray:
    """Per-pixel confidence weight 1 - H(p) with binary entropy in base 2.

    p and 1-p act as foreground/background probabilities; 0*log(0) is 0.
    Weight is 1 at p in {0, 1} and 0 at p = 0.5.
    """
    p = np.asarray(values, dtype=np.float64)
    if (p < 0).any() or (p > 1).any():
        raise ValueError("entropy_weight expects values in [0, 1]")
    q = 1.0 - p
    entropy = -(xlogy(p, p) + xlogy(q, q)) / math.log(2.0)
    return np.clip(1.0 - entropy, 0.0, 1.0)


def fuse_um_cam(stack: Sequence[np.ndarray], config: FusionConfig) -> np.ndarray:
    """Fuse normalized image-resolution maps into a single map in [0, 1].

    um_cam: per-pixel entropy-weighted average; where every map sits exactly
    at 0.5 (all weights 0) the unweighted mean is used. average_cam: plain
    mean. last_layer_only: the final (deepest-block) map unchanged.
    """
    if len(stack) == 0:
        raise ValueError("fuse_um_cam needs a non-empty stack")
    if len(stack) != config.stack_size:
        raise ValueError(f"stack has {len(stack)} maps, config expects {config.stack_size}")
    shapes = {np.asarray(m).shape for m in stack}
    if len(shapes) != 1:
        raise ValueError(f"stack maps disagree on shape: {sorted(shapes)}")
    maps = np.stack([np.asarray(m, dtype=np.float64) for m in stack])
    if config.fusion_mode == "last_layer_only":
        return maps[-1].copy()
    mean = maps.mean(axis=0)
    if config.fusion_mode == "average_cam":
        return mean
    weights = entropy_weight(maps)
    denom = weights.sum(axis=0)
    numer = (weights * maps).sum(axis=0)
    certain = denom > 0.0
    return np.where(certain, numer / np.where(certain, denom, 1.0), mean)


def binarize(values: np.ndarray, threshold: float) -> np.ndarray:
    """Threshold a [0, 1] map with a strict > comparison."""
    values = np.asarray(values)
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if (values < 0).any() or (values > 1).any():
        raise ValueError("binarize expects values in [0, 1]")
    return (values > threshold).astype(np.uint8)


def grid_search_threshold(maps: Sequence[np.ndarray], truths: Sequence[np.ndarray]):
    """Scan thresholds 0.00..0.99 (step 0.01) and return the one maximizing
    mean Dice over the map/truth pairs, with ties broken toward the smallest
    threshold. Returns (threshold, mean_dsc)."""
    if len(maps) == 0 or len(truths) == 0:
        raise ValueError("grid_search_threshold needs non-empty map and truth lists")
    if len(maps) != len(truths):
        raise ValueError(f"got {len(maps)} maps but {len(truths)} truths")
    for m, t in zip(maps, truths):
        if np.asarray(m).shape != np.asarray(t).shape:
            raise ValueError(f"map/truth shape mismatch: {np.shape(m)} vs {np.shape(t)}")
    if not any(np.asarray(t).sum() > 0 for t in truths):
        raise ValueError("at least one truth mask must be non-empty")
    best_threshold = 0.0
    best_score = -1.0
    for threshold in THRESHOLD_GRID:
        score = float(np.mean([dsc(binarize(m, threshold), t) for m, t in zip(maps, truths)]))
        if score > best_score:
            best_score = score
            best_threshold = float(threshold)
    return best_threshold, best_score
