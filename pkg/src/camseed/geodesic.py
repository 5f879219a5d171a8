"""Seed extraction and geodesic cue maps.

Seeds come from a binarized fused activation map: the foreground seed is the
(rounded) centroid of the mask, background seeds are the corners of its
bounding box. Cue maps are exponential transforms of the minimal geodesic
distance to the seeds, where a path step between neighboring pixels costs
the absolute intensity difference. Two solvers share that graph metric: an
in-place raster-scan sweep (fast path, numba-compiled) and a Dijkstra
solver on the explicit pixel graph (exact reference).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

SOLVERS = ("raster_scan", "dijkstra")


@dataclass(frozen=True)
class GeodesicConfig:
    """Solver and seed-extraction knobs.

    alpha is the exponential decay of the distance-to-similarity transform.
    raster_passes caps the number of forward/backward round trips; sweeping
    stops early once a full round trip changes nothing, at which point the
    result equals the Dijkstra solution.
    """

    alpha: float = 1.0
    connectivity: int = 8
    solver: str = "raster_scan"
    raster_passes: int = 2
    bbox_margin: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be finite and > 0, got {self.alpha}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.raster_passes < 1:
            raise ValueError(f"raster_passes must be >= 1, got {self.raster_passes}")
        if self.bbox_margin < 0:
            raise ValueError(f"bbox_margin must be >= 0, got {self.bbox_margin}")


@dataclass(frozen=True)
class SeedSet:
    """Foreground/background seed pixel coordinates, disjoint and in bounds."""

    foreground: Tuple[Tuple[int, int], ...]
    background: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        overlap = set(self.foreground) & set(self.background)
        if overlap:
            raise ValueError(f"foreground and background seeds overlap: {sorted(overlap)}")


@dataclass(frozen=True)
class PseudoLabel:
    """Background/foreground cue maps in [0, 1] at image resolution."""

    background_map: np.ndarray
    foreground_map: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.background_map)
        f = np.asarray(self.foreground_map)
        if b.shape != f.shape or b.ndim != 2:
            raise ValueError(f"cue maps must be equal-shape 2D grids: {b.shape} vs {f.shape}")
        for name, m in (("background", b), ("foreground", f)):
            if (m < 0).any() or (m > 1).any():
                raise ValueError(f"{name} cue map has values outside [0, 1]")


def extract_seeds(mask: np.ndarray, config: GeodesicConfig) -> SeedSet:
    """Derive seeds from a binary mask.

    Foreground: the per-axis half-up-rounded centroid of the foreground
    pixels, snapped to the nearest foreground pixel (ties in row-major
    order) when the rounded point falls off the mask. Background: the four
    corners of the tight bounding box expanded by bbox_margin and clipped
    to the image; corners that collide with the foreground seed are
    dropped, and an emptied background set is an error.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {mask.shape}")
    coords = np.argwhere(mask.astype(bool))
    if coords.shape[0] == 0:
        raise ValueError("no foreground evidence: cannot extract seeds from an empty mask")
    h, w = mask.shape

    centroid = coords.mean(axis=0)
    seed = np.floor(centroid + 0.5).astype(int)  # round half up, per axis
    if not mask[seed[0], seed[1]]:
        d2 = ((coords - seed) ** 2).sum(axis=1)
        seed = coords[int(np.argmin(d2))]  # argwhere is row-major, argmin takes first
    fg = (int(seed[0]), int(seed[1]))

    rmin, cmin = coords.min(axis=0)
    rmax, cmax = coords.max(axis=0)
    m = config.bbox_margin
    corners = [
        (int(np.clip(r, 0, h - 1)), int(np.clip(c, 0, w - 1)))
        for r in (rmin - m, rmax + m)
        for c in (cmin - m, cmax + m)
    ]
    background = [c for c in dict.fromkeys(corners) if c != fg]
    if not background:
        raise ValueError(
            "background seeds collapsed onto the foreground seed; mask too small to seed"
        )
    return SeedSet(foreground=(fg,), background=tuple(background))


def _validate_seeds(shape, seeds) -> list:
    if len(seeds) == 0:
        raise ValueError("seed list must be non-empty")
    h, w = shape
    clean = []
    for r, c in seeds:
        r, c = int(r), int(c)
        if not (0 <= r < h and 0 <= c < w):
            raise ValueError(f"seed ({r}, {c}) outside {h}x{w} image")
        clean.append((r, c))
    return clean


@njit(cache=True)
def _raster_sweeps(dist, image, diagonal, max_round_trips):  # pragma: no cover - jitted
    h, w = image.shape
    for _ in range(max_round_trips):
        changed = False
        for r in range(h):
            for c in range(w):
                best = dist[r, c]
                v = image[r, c]
                if c > 0:
                    d = dist[r, c - 1] + abs(v - image[r, c - 1])
                    if d < best:
                        best = d
                if r > 0:
                    d = dist[r - 1, c] + abs(v - image[r - 1, c])
                    if d < best:
                        best = d
                    if diagonal and c > 0:
                        d = dist[r - 1, c - 1] + abs(v - image[r - 1, c - 1])
                        if d < best:
                            best = d
                    if diagonal and c < w - 1:
                        d = dist[r - 1, c + 1] + abs(v - image[r - 1, c + 1])
                        if d < best:
                            best = d
                if best < dist[r, c]:
                    dist[r, c] = best
                    changed = True
        for r in range(h - 1, -1, -1):
            for c in range(w - 1, -1, -1):
                best = dist[r, c]
                v = image[r, c]
                if c < w - 1:
                    d = dist[r, c + 1] + abs(v - image[r, c + 1])
                    if d < best:
                        best = d
                if r < h - 1:
                    d = dist[r + 1, c] + abs(v - image[r + 1, c])
                    if d < best:
                        best = d
                    if diagonal and c < w - 1:
                        d = dist[r + 1, c + 1] + abs(v - image[r + 1, c + 1])
                        if d < best:
                            best = d
                    if diagonal and c > 0:
                        d = dist[r + 1, c - 1] + abs(v - image[r + 1, c - 1])
                        if d < best:
                            best = d
                if best < dist[r, c]:
                    dist[r, c] = best
                    changed = True
        if not changed:
            break
    return dist


def _neighbor_shifts(connectivity: int):
    shifts = [(0, 1), (1, 0)]
    if connectivity == 8:
        shifts += [(1, 1), (1, -1)]
    return shifts


def _grid_graph(image: np.ndarray, connectivity: int) -> sparse.csr_matrix:
    h, w = image.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    src_parts, dst_parts, wgt_parts = [], [], []
    for dr, dc in _neighbor_shifts(connectivity):
        rs = slice(0, h - dr)
        rd = slice(dr, h)
        cs = slice(0, w - dc) if dc >= 0 else slice(-dc, w)
        cd = slice(dc, w) if dc >= 0 else slice(0, w + dc)
        src_parts.append(idx[rs, cs].ravel())
        dst_parts.append(idx[rd, cd].ravel())
        wgt_parts.append(np.abs(image[rs, cs] - image[rd, cd]).ravel())
    if src_parts:
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
        wgt = np.concatenate(wgt_parts)
    else:
        src = dst = np.empty(0, dtype=np.intp)
        wgt = np.empty(0, dtype=np.float64)
    # explicit zero-weight entries are kept: csgraph treats stored zeros as real edges
    return sparse.coo_matrix((wgt, (src, dst)), shape=(n, n)).tocsr()


def geodesic_distance(
    image: np.ndarray, seeds: Sequence[Tuple[int, int]], config: GeodesicConfig
) -> np.ndarray:
    """Minimal accumulated |intensity difference| along any pixel path from
    each pixel to its nearest seed. Zero at every seed."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    seeds = _validate_seeds(image.shape, seeds)

    if config.solver == "dijkstra":
        graph = _grid_graph(image, config.connectivity)
        flat = np.unique([r * image.shape[1] + c for r, c in seeds])
        dist = _csgraph_dijkstra(graph, directed=False, indices=flat, min_only=True)
        return dist.reshape(image.shape)

    dist = np.full(image.shape, np.inf, dtype=np.float64)
    for r, c in seeds:
        dist[r, c] = 0.0
    return _raster_sweeps(dist, image, config.connectivity == 8, config.raster_passes)


def egd_map(distance: np.ndarray, alpha: float) -> np.ndarray:
    """Exponential transform exp(-alpha * D), mapping distances into (0, 1]
    with 1 exactly at the seeds."""
    distance = np.asarray(distance, dtype=np.float64)
    if (distance < 0).any():
        raise ValueError("distances must be non-negative")
    if not (np.isfinite(alpha) and alpha > 0):
        raise ValueError(f"alpha must be finite and > 0, got {alpha}")
    return np.exp(-alpha * distance)


def build_spl(image: np.ndarray, seeds: SeedSet, config: GeodesicConfig) -> PseudoLabel:
    """Seed-derived pseudo label: exponential geodesic cue maps grown from
    the foreground and background seeds over the intensity image."""
    if len(seeds.foreground) == 0 or len(seeds.background) == 0:
        raise ValueError("both seed lists must be non-empty")
    d_fg = geodesic_distance(image, seeds.foreground, config)
    d_bg = geodesic_distance(image, seeds.background, config)
    return PseudoLabel(
        background_map=egd_map(d_bg, config.alpha),
        foreground_map=egd_map(d_fg, config.alpha),
    )


def spl_to_soft_target(label: PseudoLabel) -> np.ndarray:
    """Collapse the cue pair into a single foreground probability
    f / (f + b); the denominator is strictly positive because exponential
    cue maps never reach 0."""
    f = np.asarray(label.foreground_map, dtype=np.float64)
    b = np.asarray(label.background_map, dtype=np.float64)
    return f / (f + b)
