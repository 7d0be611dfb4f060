"""Central finite-difference checks for the autodiff engine.

A probe is skipped when nudging the parameter by ``±h`` changes any ReLU
sign or pooling argmax: the loss is then not smooth across the stencil and
the difference quotient says nothing about the analytic derivative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class Probe:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float
    crosses_kink: bool


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _same_pattern(p: list, q: list) -> bool:
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def probe(loss_fn: Callable[[], T.Tensor], param: T.Tensor, index: tuple, analytic: float, h: float = 1e-3, name: str = "") -> Probe:
    """Compare ``analytic`` with the central difference of ``loss_fn`` at ``param[index]``."""
    orig = param.data[index].copy()
    with T.no_grad(), T.record_kinks() as base:
        loss_fn()
    try:
        param.data[index] = orig + h
        with T.no_grad(), T.record_kinks() as up:
            f_up = float(loss_fn().data)
        param.data[index] = orig - h
        with T.no_grad(), T.record_kinks() as down:
            f_down = float(loss_fn().data)
    finally:
        param.data[index] = orig
    numeric = (f_up - f_down) / (2 * h)
    kink = not (_same_pattern(base, up) and _same_pattern(base, down))
    return Probe(name, tuple(int(i) for i in index), analytic, numeric, relative_error(analytic, numeric), kink)


def check_all(loss_fn, params: dict[str, T.Tensor], h: float = 1e-3) -> list[Probe]:
    """Probe every element of every tensor in ``params``."""
    for p in params.values():
        p.zero_grad()
    T.backward(loss_fn())
    out = []
    for name, p in params.items():
        grad = p.grad.copy()
        for idx in np.ndindex(p.shape):
            out.append(probe(loss_fn, p, idx, float(grad[idx]), h, name))
    return out


def check_sampled(loss_fn, params: dict[str, T.Tensor], n_samples: int, seed: int = 0, h: float = 1e-3) -> list[Probe]:
    """Probe ``n_samples`` parameter elements drawn uniformly over all tensors.

    Probes that straddle a kink are returned flagged and do not count
    towards ``n_samples``; drawing continues until enough clean ones exist
    or every element has been tried.
    """
    for p in params.values():
        p.zero_grad()
    T.backward(loss_fn())
    grads = {k: p.grad.copy() for k, p in params.items()}
    flat = [(k, idx) for k, p in params.items() for idx in np.ndindex(p.shape)]
    order = np.random.default_rng(seed).permutation(len(flat))
    out, clean = [], 0
    for j in order:
        name, idx = flat[j]
        pr = probe(loss_fn, params[name], idx, float(grads[name][idx]), h, name)
        out.append(pr)
        clean += not pr.crosses_kink
        if clean >= n_samples:
            break
    return out
