"""A small reverse-mode autodiff engine over numpy arrays.

Only what the U-Net needs is here: elementwise arithmetic, 2D convolution,
ReLU, 2x2 max pooling, nearest 2x upsampling, channel concatenation,
sigmoid and binary cross-entropy, plus an Adam update.

Tensors default to float32.  A float64 array stays float64, which the
gradient checks rely on.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import MissingGradient, NonScalarLoss, ShapeMismatch

BCE_EPS = 1e-7

_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the ReLU sign patterns and pooling argmaxes of every forward.

    Two forward passes with equal logs lie on the same linear piece of the
    network, which is what a finite-difference check needs.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward_fn = backward_fn

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return total(self)

    def mean(self):
        return mul(total(self), 1.0 / self.size)

    def backward(self):
        backward(self)


def _wrap(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn) -> Tensor:
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out = (a.data * b.data).astype(a.dtype, copy=False)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), bw)


def total(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(out, (a,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask.copy())
    out = x.data * mask

    def bw(g):
        return (g * mask,)

    return _make(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw)


# convolutional network ops ------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [F,C,kh,kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeMismatch("conv2d expects 4D input and kernel")
    n, c, h, w = x.shape
    f, c2, kh, kw = weight.shape
    if c != c2:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {c2}")
    if stride < 1:
        raise ShapeMismatch("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeMismatch("kernel larger than padded input")
    if bias is not None and bias.shape != (f,):
        raise ShapeMismatch(f"bias shape {bias.shape}, expected {(f,)}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: output pixels (n, i, j); columns: (c, u, v)
    cols = np.ascontiguousarray(win[:, :, :ho, :wo].transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(weight.shape)
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; the gradient goes to the first maximum."""
    if window != 2 or stride != 2:
        raise ValueError("only window 2, stride 2 pooling is implemented")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"pooling needs even extents, got {(h, w)}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    if _kink_log is not None:
        _kink_log.append(idx.copy())
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; backward sums each 2x2 block."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeMismatch("concat_channels expects 4D tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeMismatch(f"cannot concatenate {a.shape} with {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), bw)


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {t.shape}")
    p64 = pred.data.astype(np.float64)
    t64 = t.astype(np.float64)
    pc = np.clip(p64, eps, 1.0 - eps)
    losses = -(t64 * np.log(pc) + (1.0 - t64) * np.log1p(-pc))
    out = np.asarray(losses.mean(), dtype=pred.dtype)

    def bw(g):
        inside = (p64 >= eps) & (p64 <= 1.0 - eps)
        d = np.where(inside, (pc - t64) / (pc * (1.0 - pc)), 0.0) / p64.size
        return ((float(g) * d).astype(pred.dtype),)

    return _make(out, (pred,), bw)


# reverse pass --------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise NonScalarLoss(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    visited: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# optimisation ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros(p.shape, dtype=np.float64) for p in params],
            v=[np.zeros(p.shape, dtype=np.float64) for p in params],
        )


def adam_step(
    params,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int | None = None,
) -> None:
    """One bias-corrected Adam update, in place on ``params[i].data``.

    Moments are kept in float64 and the step is cast back to the parameter
    dtype.  ``t`` defaults to ``state.t + 1``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step index must be >= 1")
    if not state.m:
        fresh = AdamState.for_params(params)
        state.m, state.v = fresh.m, fresh.v
    for k, p in enumerate(params):
        if p.grad is None:
            raise MissingGradient(f"parameter {k} has no gradient")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in enumerate(params):
        g = p.grad.astype(np.float64)
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    state.t = t
