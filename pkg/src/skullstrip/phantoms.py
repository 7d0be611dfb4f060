"""Synthetic coronal-slice phantoms with an analytic brain mask.

A phantom is a bright ellipse ("brain") near the image centre, optionally
with an off-centre bright bar ("muscle"), on a dark noisy background.
Edges are anti-aliased by supersampling so that intensities carry partial
volume; the returned mask is the analytic ellipse evaluated at pixel
centres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import Volume

_SUPERSAMPLE = 4


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float  # radians

    def inside(self, y, x):
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (x - self.cx) * c + (y - self.cy) * s
        v = -(x - self.cx) * s + (y - self.cy) * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


def _coverage(shape, inside) -> np.ndarray:
    h, w = shape
    k = _SUPERSAMPLE
    sub = (np.arange(k) + 0.5) / k - 0.5
    ys = (np.arange(h)[:, None] + sub[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + sub[None, :]).reshape(-1)
    hit = inside(ys[:, None], xs[None, :]).astype(np.float64)
    return hit.reshape(h, k, w, k).mean(axis=(1, 3))


def random_ellipse(size: int, rng: np.random.Generator) -> Ellipse:
    c = (size - 1) / 2.0
    return Ellipse(
        cy=c + rng.uniform(-0.05, 0.05) * size,
        cx=c + rng.uniform(-0.05, 0.05) * size,
        ry=rng.uniform(0.17, 0.24) * size,
        rx=rng.uniform(0.24, 0.32) * size,
        angle=rng.uniform(-0.3, 0.3),
    )


def _random_bar(size: int, brain_mask: np.ndarray, rng: np.random.Generator):
    """Axis-aligned bar hugging one image edge, clear of the brain."""
    grow = np.pad(brain_mask, 3)
    for _ in range(100):
        thick = rng.uniform(0.06, 0.1) * size
        length = rng.uniform(0.3, 0.5) * size
        margin = rng.uniform(0.03, 0.06) * size
        along = rng.uniform(0.2, 0.8) * size
        side = int(rng.integers(4))
        if side in (0, 1):  # top / bottom
            y0 = margin if side == 0 else size - margin - thick
            box = (y0, y0 + thick, along - length / 2, along + length / 2)
        else:
            x0 = margin if side == 2 else size - margin - thick
            box = (along - length / 2, along + length / 2, x0, x0 + thick)
        y0, y1, x0, x1 = box

        def inside(y, x, box=box):
            return (y >= box[0]) & (y < box[1]) & (x >= box[2]) & (x < box[3])

        cov = _coverage((size, size), inside)
        hit = np.pad(cov > 0, 3)
        near = np.zeros_like(hit)
        for dy in range(-3, 4):
            for dx in range(-3, 4):
                near |= np.roll(np.roll(hit, dy, 0), dx, 1)
        if not (near & grow).any():
            return cov
    raise RuntimeError("could not place a distractor clear of the brain")


def make_phantom(
    size: int = 64,
    rng: np.random.Generator | int | None = None,
    distractor: bool = True,
    noise: float = 0.03,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image, brain_mask)`` for one synthetic slice."""
    rng = np.random.default_rng(rng)
    ell = random_ellipse(size, rng)
    brain = _coverage((size, size), ell.inside)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ell.inside(yy.astype(float), xx.astype(float)).astype(np.uint8)

    img = 0.05 + brain * rng.uniform(0.55, 0.75)
    # slow shading across the brain
    gy, gx = rng.normal(0, 0.002, size=2)
    img += brain * ((yy - ell.cy) * gy + (xx - ell.cx) * gx)
    if distractor:
        bar = _random_bar(size, mask, rng)
        img += bar * rng.uniform(0.6, 0.85)
    img += rng.normal(0.0, noise, size=img.shape)
    return img.astype(np.float32), mask


def phantom_set(n: int, size: int = 64, seed: int = 0, distractor: bool = True):
    """``n`` independent phantoms, each drawn from its own child seed."""
    seeds = np.random.SeedSequence(seed).spawn(n)
    return [make_phantom(size, np.random.default_rng(s), distractor) for s in seeds]


def phantom_volume(
    n_slices: int = 17, size: int = 80, seed: int = 0, distractor: bool = True
) -> tuple[Volume, Volume]:
    """Image and analytic mask volumes built from stacked phantoms."""
    pairs = phantom_set(n_slices, size, seed, distractor)
    img = np.stack([p[0].T for p in pairs], axis=2)
    mask = np.stack([p[1].T.astype(np.float32) for p in pairs], axis=2)
    spacing = (0.25, 0.25, 1.0)
    return Volume(img.shape, spacing, img), Volume(mask.shape, spacing, mask)
