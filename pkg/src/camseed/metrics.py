"""Segmentation quality metrics: Dice overlap and 95th-percentile boundary
distance, per slice or per stacked volume, with cohort aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


def dsc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice similarity 2|P&T| / (|P|+|T|).

    Both masks empty -> 1.0 (perfect agreement on nothing); exactly one
    empty -> 0.0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    p_count = int(p.sum())
    t_count = int(t.sum())
    if p_count == 0 and t_count == 0:
        return 1.0
    if p_count == 0 or t_count == 0:
        return 0.0
    inter = int(np.logical_and(p, t).sum())
    return 2.0 * inter / (p_count + t_count)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground elements with at least one face-neighbor background cell,
    where anything beyond the image edge counts as background. Works for any
    dimensionality (4-neighborhood in 2D, 6 in 3D)."""
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    core = tuple(slice(1, s + 1) for s in m.shape)
    surrounded = np.ones_like(m)
    for axis in range(m.ndim):
        for off in (-1, 1):
            sl = list(core)
            sl[axis] = slice(core[axis].start + off, core[axis].stop + off)
            surrounded &= padded[tuple(sl)]
    return m & ~surrounded


def hd95(pred: np.ndarray, truth: np.ndarray, spacing: Optional[Sequence[float]] = None) -> float:
    """95th percentile of the pooled boundary-to-boundary distances.

    Directed distances from every boundary pixel of each mask to the other
    mask's boundary are pooled into one set, and the percentile uses linear
    interpolation between order statistics. Distances are Euclidean scaled
    by the per-axis spacing (defaults to 1). Raises if either mask is empty;
    cohort evaluation records that as an undefined entry instead.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if spacing is None:
        spacing = (1.0,) * pred.ndim
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,) or (spacing <= 0).any():
        raise ValueError(f"spacing must give one positive factor per axis, got {spacing}")
    if not pred.astype(bool).any() or not truth.astype(bool).any():
        raise ValueError("hd95 is undefined for empty masks")
    pred_pts = np.argwhere(boundary_mask(pred)) * spacing
    truth_pts = np.argwhere(boundary_mask(truth)) * spacing
    d_pred, _ = cKDTree(truth_pts).query(pred_pts)
    d_truth, _ = cKDTree(pred_pts).query(truth_pts)
    pooled = np.concatenate([d_pred, d_truth])
    return float(np.percentile(pooled, 95))


@dataclass(frozen=True)
class UnitResult:
    unit_id: str
    dsc: float
    hd95: Optional[float]  # None when either mask was empty


@dataclass(frozen=True)
class EvalReport:
    """Per-unit metric rows plus cohort mean/std. Undefined boundary
    distances are excluded from the aggregate."""

    mode: str
    per_unit: tuple
    spacing: tuple

    @property
    def dsc_values(self) -> np.ndarray:
        return np.array([u.dsc for u in self.per_unit], dtype=np.float64)

    @property
    def hd95_values(self) -> np.ndarray:
        return np.array([u.hd95 for u in self.per_unit if u.hd95 is not None], dtype=np.float64)

    def summary(self) -> dict:
        d = self.dsc_values
        h = self.hd95_values
        return {
            "n_units": len(self.per_unit),
            "mean_dsc": float(d.mean()) if d.size else None,
            "std_dsc": float(d.std()) if d.size else None,
            "n_hd95_defined": int(h.size),
            "mean_hd95": float(h.mean()) if h.size else None,
            "std_hd95": float(h.std()) if h.size else None,
        }

    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "spacing": list(self.spacing),
            "per_unit": [
                {"unit_id": u.unit_id, "dsc": u.dsc, "hd95": u.hd95} for u in self.per_unit
            ],
            "summary": self.summary(),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def format_table(self) -> str:
        lines = [f"{'unit':<16}{'DSC (%)':>14}{'HD95':>14}"]
        for u in self.per_unit:
            hd = f"{u.hd95:.2f}" if u.hd95 is not None else "undef"
            lines.append(f"{u.unit_id:<16}{100.0 * u.dsc:>14.2f}{hd:>14}")
        s = self.summary()
        if s["mean_dsc"] is not None:
            dsc_part = f"{100.0 * s['mean_dsc']:.2f}±{100.0 * s['std_dsc']:.2f}"
            if s["mean_hd95"] is not None:
                hd_part = f"{s['mean_hd95']:.2f}±{s['std_hd95']:.2f}"
            else:
                hd_part = "undef"
            lines.append(f"{'mean':<16}{dsc_part:>14}{hd_part:>14}")
        return "\n".join(lines)


EVAL_MODES = ("per_slice_2d", "per_volume_3d")


def evaluate_cohort(
    pairs: Sequence[tuple],
    mode: str = "per_slice_2d",
    spacing_2d: Sequence[float] = (1.0, 1.0),
    spacing_3d: Sequence[float] = (1.0, 1.0, 7.0),
) -> EvalReport:
    """Evaluate (pred, truth, unit_id) triples.

    per_slice_2d treats each triple as a unit. per_volume_3d stacks the
    slices of each unit_id (in list order) along a third axis and evaluates
    the stacked volumes, with ``spacing_3d`` giving (row, col, slice)
    physical step sizes.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    if len(pairs) == 0:
        raise ValueError("evaluate_cohort needs at least one (pred, truth, id) triple")

    if mode == "per_slice_2d":
        spacing = tuple(float(s) for s in spacing_2d)
        units = [(unit_id, np.asarray(p), np.asarray(t)) for p, t, unit_id in pairs]
    else:
        spacing = tuple(float(s) for s in spacing_3d)
        grouped: dict = {}
        order = []
        for p, t, unit_id in pairs:
            if unit_id not in grouped:
                grouped[unit_id] = []
                order.append(unit_id)
            grouped[unit_id].append((np.asarray(p), np.asarray(t)))
        units = []
        for unit_id in order:
            slices = grouped[unit_id]
            shapes = {s[0].shape for s in slices} | {s[1].shape for s in slices}
            if len(shapes) != 1:
                raise ValueError(f"volume {unit_id!r} mixes slice shapes: {sorted(shapes)}")
            pred_vol = np.stack([s[0] for s in slices], axis=-1)
            truth_vol = np.stack([s[1] for s in slices], axis=-1)
            units.append((unit_id, pred_vol, truth_vol))

    rows = []
    for unit_id, pred, truth in units:
        score = dsc(pred, truth)
        try:
            distance = hd95(pred, truth, spacing)
        except ValueError:
            distance = None
        rows.append(UnitResult(unit_id=str(unit_id), dsc=score, hd95=distance))
    return EvalReport(mode=mode, per_unit=tuple(rows), spacing=spacing)
