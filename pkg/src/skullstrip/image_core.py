"""Per-slice preprocessing primitives used ahead of the watershed.

Slices are 2D ``float32`` arrays indexed ``[row, col]``; binary masks are
``uint8`` arrays holding only 0 and 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall, ShapeMismatch


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray
    gy: np.ndarray
    mag: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mag.shape


def normalize(img: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.float32)
    out = (img - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _disk_offsets(radius: float) -> list[tuple[int, int]]:
    r = int(np.floor(radius))
    return [
        (dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= radius * radius
    ]


def _shifted(img: np.ndarray, dy: int, dx: int, fill: float) -> np.ndarray:
    """``out[y, x] = img[y + dy, x + dx]``, ``fill`` outside the image."""
    h, w = img.shape
    out = np.full_like(img, fill)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yd = slice(max(0, dy), min(h, h + dy))
    xd = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = img[yd, xd]
    return out


def mean_shift_filter(
    img: np.ndarray,
    spatial_radius: float = 2,
    range_radius: float = 0.1,
    max_iter: int = 5,
    tol: float = 1e-3,
) -> np.ndarray:
    """Gray-level mean shift with a hard range gate.

    Each pixel's estimate ``v`` is repeatedly replaced by the mean of the
    original intensities inside the disk of ``spatial_radius`` that lie
    within ``range_radius`` of ``v``.  A pixel stops once its estimate moves
    by less than ``tol``; all pixels stop after ``max_iter`` rounds.
    """
    if spatial_radius <= 0 or range_radius <= 0:
        raise ValueError("mean-shift radii must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    src = np.asarray(img, dtype=np.float64)
    offsets = _disk_offsets(spatial_radius)
    # NaN marks out-of-image neighbours, which never pass the range gate
    neighbours = [_shifted(src, dy, dx, np.nan) for dy, dx in offsets]
    est = src.copy()
    active = np.ones(src.shape, dtype=bool)
    for _ in range(max_iter):
        total = np.zeros_like(src)
        count = np.zeros_like(src)
        for nb in neighbours:
            with np.errstate(invalid="ignore"):
                keep = np.abs(nb - est) <= range_radius
            total += np.where(keep, nb, 0.0)
            count += keep
        new = np.where(count > 0, total / np.maximum(count, 1), est)
        moved = np.abs(new - est)
        est = np.where(active, new, est)
        active &= moved >= tol
        if not active.any():
            break
    return est.astype(np.float32)


def gradient_magnitude(img: np.ndarray) -> GradientField:
    """Central differences inside, one-sided differences on the border."""
    f = np.asarray(img, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2 or f.shape[1] < 2:
        raise ImageTooSmall(f"gradient needs at least 2x2 pixels, got {f.shape}")
    gx = np.empty_like(f)
    gy = np.empty_like(f)
    gx[:, 1:-1] = (f[:, 2:] - f[:, :-2]) / 2.0
    gx[:, 0] = f[:, 1] - f[:, 0]
    gx[:, -1] = f[:, -1] - f[:, -2]
    gy[1:-1, :] = (f[2:, :] - f[:-2, :]) / 2.0
    gy[0, :] = f[1, :] - f[0, :]
    gy[-1, :] = f[-1, :] - f[-2, :]
    mag = np.sqrt(gx * gx + gy * gy)
    return GradientField(gx=gx, gy=gy, mag=mag)


def box_smooth(values: np.ndarray) -> np.ndarray:
    """3x3 mean with edge replication."""
    v = np.asarray(values, dtype=np.float64)
    padded = np.pad(v, 1, mode="edge")
    h, w = v.shape
    acc = np.zeros_like(v)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + h, dx:dx + w]
    return acc / 9.0


def threshold(img: np.ndarray, level: float = 0.3) -> np.ndarray:
    return (np.asarray(img) >= level).astype(np.uint8)


def _cross_neighbours(mask: np.ndarray):
    yield mask
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        yield _shifted(mask, dy, dx, 0)


def erode(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary erosion by a 3x3 cross; pixels outside the image count as 0."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    m = (np.asarray(mask) != 0).astype(np.uint8)
    for _ in range(iterations):
        out = np.ones_like(m)
        for nb in _cross_neighbours(m):
            out &= nb
        m = out
    return m


def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Binary dilation by a 3x3 cross."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    m = (np.asarray(mask) != 0).astype(np.uint8)
    for _ in range(iterations):
        out = np.zeros_like(m)
        for nb in _cross_neighbours(m):
            out |= nb
        m = out
    return m


def resize_bilinear(img: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment and edge clamping.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * in / out - 0.5``;
    equal extents reproduce the input exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2D slice, got shape {img.shape}")
    oh, ow = int(shape[0]), int(shape[1])
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"target extents must be >= 1, got {(oh, ow)}")
    if (oh, ow) == img.shape:
        return img.astype(np.float32)

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(img.shape[0], oh)
    x0, x1, wx = axis(img.shape[1], ow)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy)[:, None] + bot * wy[:, None]).astype(np.float32)
