"""Marker-controlled watershed and brain-region selection.

Label maps are ``int32`` arrays: 0 is unassigned (or watershed line), 1 is
sure background when produced by :func:`make_markers`, and labels >= 2 are
foreground seeds.  8-connectivity is used throughout.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import image_core
from .errors import (
    EmptyForeground,
    NoCandidateRegion,
    ShapeMismatch,
    TooFewMarkers,
)

BACKGROUND = 1
_N8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass
class WatershedParams:
    threshold: float = 0.3
    spatial_radius: float = 2.0
    range_radius: float = 0.1
    max_iter: int = 5
    fg_erosions: int = 2
    bg_dilations: int = 2
    min_area: int | None = None  # pixels; None means 1% of the slice
    smooth_gradient: bool = True
    resolve_lines: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.spatial_radius <= 0 or self.range_radius <= 0:
            raise ValueError("mean-shift radii must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.fg_erosions < 0 or self.bg_dilations < 0:
            raise ValueError("erosion/dilation counts must be >= 0")
        if self.min_area is not None and self.min_area < 1:
            raise ValueError("min_area must be >= 1")

    def min_area_for(self, shape) -> int:
        if self.min_area is not None:
            return self.min_area
        return max(1, int(round(0.01 * shape[0] * shape[1])))


def connected_components(mask: np.ndarray) -> np.ndarray:
    """Label 8-connected components, numbered in raster order of first pixel."""
    m = np.asarray(mask) != 0
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for y0, x0 in zip(*np.nonzero(m)):
        if labels[y0, x0]:
            continue
        current += 1
        labels[y0, x0] = current
        queue = deque([(y0, x0)])
        while queue:
            y, x = queue.popleft()
            for dy, dx in _N8:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and m[ny, nx] and not labels[ny, nx]:
                    labels[ny, nx] = current
                    queue.append((ny, nx))
    return labels


def make_markers(
    img: np.ndarray, level: float = 0.3, fg_erosions: int = 2, bg_dilations: int = 2
) -> np.ndarray:
    fg = image_core.threshold(img, level)
    if not fg.any():
        raise EmptyForeground(f"no pixel reaches threshold {level}")
    sure_fg = image_core.erode(fg, fg_erosions)
    if not sure_fg.any():
        raise EmptyForeground(f"foreground vanished after {fg_erosions} erosions")
    sure_bg = image_core.dilate(fg, bg_dilations) == 0
    markers = np.zeros(fg.shape, dtype=np.int32)
    markers[sure_bg] = BACKGROUND
    comps = connected_components(sure_fg)
    markers[comps > 0] = comps[comps > 0] + 1
    return markers


def watershed_flood(grad, markers: np.ndarray) -> np.ndarray:
    """Meyer priority flood of ``grad`` (a GradientField or a 2D cost array).

    Unlabelled pixels are visited in increasing cost, FIFO among equal
    costs.  A pixel whose already-labelled neighbours carry more than one
    label becomes watershed line (0) and does not propagate.
    """
    cost = grad.mag if hasattr(grad, "mag") else np.asarray(grad)
    markers = np.asarray(markers)
    if cost.shape != markers.shape:
        raise ShapeMismatch(f"cost {cost.shape} vs markers {markers.shape}")
    if len(np.unique(markers[markers > 0])) < 2:
        raise TooFewMarkers("watershed needs at least two distinct marker labels")

    h, w = markers.shape
    out = markers.astype(np.int32).copy()
    queued = out > 0
    heap: list[tuple[float, int, int, int]] = []
    counter = 0
    for y, x in zip(*np.nonzero(out)):
        for dy, dx in _N8:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not queued[ny, nx]:
                queued[ny, nx] = True
                heapq.heappush(heap, (float(cost[ny, nx]), counter, ny, nx))
                counter += 1

    while heap:
        _, _, y, x = heapq.heappop(heap)
        seen = 0
        for dy, dx in _N8:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w:
                lab = out[ny, nx]
                if lab:
                    if seen and lab != seen:
                        seen = -1
                        break
                    seen = lab
        if seen <= 0:
            continue  # watershed line
        out[y, x] = seen
        for dy, dx in _N8:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not queued[ny, nx]:
                queued[ny, nx] = True
                heapq.heappush(heap, (float(cost[ny, nx]), counter, ny, nx))
                counter += 1
    return out


def region_stats(regions: np.ndarray) -> dict[int, tuple[int, float]]:
    """``label -> (area, mean distance of its pixels to the image centre)``."""
    regions = np.asarray(regions)
    h, w = regions.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.indices((h, w))
    dist = np.hypot(ys - cy, xs - cx)
    stats = {}
    for lab in np.unique(regions):
        if lab <= 0:
            continue
        sel = regions == lab
        stats[int(lab)] = (int(sel.sum()), float(dist[sel].mean()))
    return stats


def select_brain_mask(regions: np.ndarray, min_area: int = 1) -> np.ndarray:
    """Pick the region closest on average to the image centre.

    Only regions with at least ``min_area`` pixels compete.  Equal mean
    distances are resolved by larger area, then lower label.
    """
    stats = {k: v for k, v in region_stats(regions).items() if v[0] >= min_area}
    if not stats:
        raise NoCandidateRegion(f"no region with area >= {min_area}")
    best_dist = min(d for _, d in stats.values())
    tied = [
        (lab, area)
        for lab, (area, d) in stats.items()
        if math.isclose(d, best_dist, rel_tol=1e-12, abs_tol=1e-12)
    ]
    label = min(tied, key=lambda t: (-t[1], t[0]))[0]
    return (np.asarray(regions) == label).astype(np.uint8)


def resolve_watershed_lines(regions: np.ndarray, img: np.ndarray) -> np.ndarray:
    """Hand each watershed-line pixel to the adjacent region of nearest mean.

    The line lies on partial-volume edge pixels; assigning them by intensity
    keeps the region boundary at the half-way contrast level.
    """
    regions = np.asarray(regions)
    img = np.asarray(img, dtype=np.float64)
    h, w = regions.shape
    labels = np.unique(regions[regions > 0])
    means = {int(k): float(img[regions == k].mean()) for k in labels}
    out = regions.copy()
    for y, x in zip(*np.nonzero(regions == 0)):
        near = {
            int(regions[y + dy, x + dx])
            for dy, dx in _N8
            if 0 <= y + dy < h and 0 <= x + dx < w and regions[y + dy, x + dx] > 0
        }
        if near:
            out[y, x] = min(near, key=lambda k: (abs(img[y, x] - means[k]), k))
    return out


def segment_slice(img: np.ndarray, params: WatershedParams | None = None) -> np.ndarray:
    """Full watershed pipeline for one slice, returning the brain mask."""
    p = params or WatershedParams()
    norm = image_core.normalize(img)
    smoothed = image_core.normalize(
        image_core.mean_shift_filter(norm, p.spatial_radius, p.range_radius, p.max_iter)
    )
    grad = image_core.gradient_magnitude(smoothed)
    cost = image_core.box_smooth(grad.mag) if p.smooth_gradient else grad.mag
    markers = make_markers(smoothed, p.threshold, p.fg_erosions, p.bg_dilations)
    regions = watershed_flood(cost, markers)
    if p.resolve_lines:
        regions = resolve_watershed_lines(regions, smoothed)
    # the sure-background basin is never a brain candidate
    regions[regions == BACKGROUND] = 0
    return select_brain_mask(regions, p.min_area_for(regions.shape))
