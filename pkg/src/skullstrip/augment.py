"""Joint image/mask augmentation.

Every transform maps output pixel coordinates back to source coordinates
(inverse mapping) and samples there: bilinearly for images, nearest
neighbour for masks.  Samples falling outside the source read as 0.

The forward geometric map applied to content is, in order: optional
flips, rotation about the image centre, scaling about the centre, then
translation.  A positive rotation turns content counter-clockwise as
displayed (row 0 at the top), so ``rotation=90`` on a square image equals
``np.rot90``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EmptyDataset, ShapeMismatch


@dataclass(frozen=True)
class AugmentSpec:
    flip_h: bool = False
    flip_v: bool = False
    rotation: float = 0.0  # degrees
    tx: float = 0.0  # pixels, +x is right
    ty: float = 0.0  # pixels, +y is down
    scale: float = 1.0
    elastic_alpha: float = 0.0
    elastic_sigma: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if self.elastic_alpha < 0:
            raise ValueError("elastic_alpha must be >= 0")
        if self.elastic_alpha > 0 and not self.elastic_sigma > 0:
            raise ValueError("elastic_sigma must be > 0 when elastic_alpha > 0")


@dataclass(frozen=True)
class DisplacementField:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def shape(self):
        return self.dx.shape

    @classmethod
    def zeros(cls, height: int, width: int) -> "DisplacementField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


def _cos_sin(degrees: float) -> tuple[float, float]:
    # exact values on right angles keep those rotations pure permutations
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    rad = math.radians(degrees)
    return math.cos(rad), math.sin(rad)


def make_elastic_field(width: int, height: int, alpha: float, sigma: float, seed) -> DisplacementField:
    """Smoothed uniform noise, rescaled so the largest displacement is ``alpha``.

    Gaussian smoothing (reflecting borders, truncated at 4 sigma) shrinks
    the raw field by a factor that depends on ``sigma``; the rescale keeps
    ``alpha`` meaning the peak displacement in pixels.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if alpha == 0:
        return DisplacementField.zeros(height, width)
    rng = np.random.default_rng(seed)
    raw = rng.uniform(-1.0, 1.0, size=(2, height, width))
    dx = gaussian_filter(raw[0], sigma, mode="reflect", truncate=4.0)
    dy = gaussian_filter(raw[1], sigma, mode="reflect", truncate=4.0)
    peak = max(np.abs(dx).max(), np.abs(dy).max())
    if peak == 0:
        return DisplacementField.zeros(height, width)
    return DisplacementField(dx * (alpha / peak), dy * (alpha / peak))


def _source_coords(shape, spec: AugmentSpec, field: DisplacementField | None):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.indices((h, w), dtype=np.float64)
    if field is not None:
        xs = xs + field.dx
        ys = ys + field.dy
    # undo translation, then scale, then rotation, then flips
    u = (xs - spec.tx - cx) / spec.scale
    v = (ys - spec.ty - cy) / spec.scale
    c, s = _cos_sin(spec.rotation)
    # content rotation: u' = c*u + s*v, v' = -s*u + c*v; invert with the transpose
    su = c * u - s * v
    sv = s * u + c * v
    if spec.flip_h:
        su = -su
    if spec.flip_v:
        sv = -sv
    return sv + cy, su + cx


def sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup with zero outside ``img``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape, dtype=np.float64)
    for oy, wy in ((0, 1.0 - fy), (1, fy)):
        for ox, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + oy
            xx = x0 + ox
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            wgt = wy * wx
            ok &= wgt != 0
            out[ok] += wgt[ok] * img[yy[ok], xx[ok]]
    return out


def sample_nearest(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape
    yy = np.floor(ys + 0.5).astype(np.int64)
    xx = np.floor(xs + 0.5).astype(np.int64)
    ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    out = np.zeros(ys.shape, dtype=img.dtype)
    out[ok] = img[yy[ok], xx[ok]]
    return out


def warp_pair(img: np.ndarray, mask: np.ndarray, spec: AugmentSpec, field: DisplacementField | None = None):
    """Apply one geometric map, identically, to an image and its mask."""
    img = np.asarray(img)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise ShapeMismatch(f"image {img.shape} vs mask {mask.shape}")
    h, w = img.shape
    if field is None and spec.elastic_alpha > 0:
        field = make_elastic_field(w, h, spec.elastic_alpha, spec.elastic_sigma, spec.seed)
    elif field is not None and field.shape != img.shape:
        raise ShapeMismatch(f"field {field.shape} vs image {img.shape}")
    ys, xs = _source_coords(img.shape, spec, field)
    out_img = sample_bilinear(img, ys, xs).astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float32)
    out_mask = (sample_nearest(mask, ys, xs) != 0).astype(np.uint8)
    return out_img, out_mask


def random_spec(
    rng: np.random.Generator,
    shape,
    elastic_alpha: float = 2.0,
    elastic_sigma: float = 8.0,
    right_angle_prob: float = 0.25,
) -> AugmentSpec:
    """Draw a mild augmentation: small or right-angle rotations, <=10% shifts."""
    h, w = shape
    if rng.random() < right_angle_prob:
        rotation = float(90 * rng.integers(1, 4))
    else:
        rotation = float(rng.uniform(-15.0, 15.0))
    return AugmentSpec(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        rotation=rotation,
        tx=float(rng.uniform(-0.1, 0.1) * w),
        ty=float(rng.uniform(-0.1, 0.1) * h),
        scale=float(rng.uniform(0.9, 1.1)),
        elastic_alpha=elastic_alpha,
        elastic_sigma=elastic_sigma,
        seed=int(rng.integers(2**31)),
    )


def expand_dataset(pairs, fraction: float = 0.5, seed: int = 0, **spec_kwargs):
    """Originals followed by ``floor(fraction * N)`` augmented copies.

    Sources are drawn without replacement until every pair has been used
    once, then with replacement.  Copy ``k`` draws its spec from a
    generator seeded by ``(seed, k)`` so copies are independent of each
    other and reproducible.
    """
    pairs = list(pairs)
    n = len(pairs)
    if n == 0:
        raise EmptyDataset("cannot expand an empty dataset")
    if fraction < 0:
        raise ValueError("fraction must be >= 0")
    extra = int(math.floor(fraction * n))
    rng = np.random.default_rng([seed, 0x5eed])
    sources = list(rng.permutation(n)[: min(extra, n)])
    if extra > n:
        sources += list(rng.integers(0, n, size=extra - n))
    out = list(pairs)
    for k, src in enumerate(sources):
        img, mask = pairs[int(src)]
        spec = random_spec(np.random.default_rng([seed, k]), np.shape(img), **spec_kwargs)
        out.append(warp_pair(img, mask, spec))
    return out

