"""Joint supervision objective on prediction maps.

Pure evaluators, reduced by pixel mean so the balance weight is independent
of image size. Log arguments are clamped by a small epsilon so confident
mistakes yield large finite values instead of infinities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    """balance ``lam`` in [0, 1] weights the fused-map term against the
    seed-label term; epsilon clamps log arguments."""

    lam: float = 0.1
    epsilon: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if not 0.0 < self.epsilon <= 1e-4:
            raise ValueError(f"epsilon must be in (0, 1e-4], got {self.epsilon}")


def _check_unit_map(name: str, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if (values < 0).any() or (values > 1).any():
        raise ValueError(f"{name} has values outside [0, 1]")
    return values


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray, epsilon: float = 1e-7) -> float:
    """Mean over pixels of -[t*ln(p) + (1-t)*ln(1-p)], with p and 1-p
    clamped below by epsilon. Finite and non-negative."""
    pred = _check_unit_map("pred", pred)
    target = _check_unit_map("target", target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    log_p = np.log(np.maximum(pred, epsilon))
    log_not_p = np.log(np.maximum(1.0 - pred, epsilon))
    return float(np.mean(-(target * log_p + (1.0 - target) * log_not_p)))


def joint_loss(
    pred: np.ndarray,
    um_cam: np.ndarray,
    spl_target: np.ndarray,
    config: LossConfig,
) -> Tuple[float, float, float]:
    """Convex combination lam*CE(pred, fused map) + (1-lam)*CE(pred, seed
    target); returns (total, ce_um, ce_spl) so both terms stay visible."""
    ce_um = binary_cross_entropy(pred, um_cam, config.epsilon)
    ce_spl = binary_cross_entropy(pred, spl_target, config.epsilon)
    total = config.lam * ce_um + (1.0 - config.lam) * ce_spl
    return total, ce_um, ce_spl
