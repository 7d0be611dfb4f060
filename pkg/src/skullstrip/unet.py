"""Compact U-Net for per-slice brain soft masks, plus checkpoint I/O.

Architecture for ``depth`` levels with ``base`` channels:

* encoder level ``l`` (1-based): two 3x3 same-padded conv+ReLU blocks with
  ``base * 2**(l-1)`` channels, 2x2 max pool between levels;
* decoder level ``l`` (``depth-1`` down to 1): nearest 2x upsample, concat
  with the encoder output of level ``l``, two conv+ReLU blocks;
* 1x1 conv to a single channel and a sigmoid.

Checkpoint layout (little-endian): ``b"SKST"``, u32 version, u32 depth,
u32 base_channels, u32 H, u32 W, then for every parameter u32 name length,
UTF-8 name, u32 rank, rank x u32 extents and the float32 payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    CorruptCheckpoint,
    IndivisibleInput,
    IoFailure,
    ShapeMismatch,
    VersionMismatch,
)

CHECKPOINT_MAGIC = b"SKST"
CHECKPOINT_VERSION = 1


def level_channels(base: int, level: int) -> int:
    return base * 2 ** (level - 1)


def parameter_shapes(depth: int, base: int) -> dict[str, tuple[int, ...]]:
    """Ordered ``name -> shape`` for every weight and bias of the network."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = 1
    for lvl in range(1, depth + 1):
        ch = level_channels(base, lvl)
        conv(f"enc{lvl}.conv1", cin, ch)
        conv(f"enc{lvl}.conv2", ch, ch)
        cin = ch
    for lvl in range(depth - 1, 0, -1):
        ch = level_channels(base, lvl)
        conv(f"dec{lvl}.conv1", level_channels(base, lvl + 1) + ch, ch)
        conv(f"dec{lvl}.conv2", ch, ch)
    conv("head", level_channels(base, 1), 1, k=1)
    return shapes


class UNetModel:
    def __init__(self, depth: int, base_channels: int, input_size, params: dict[str, T.Tensor]):
        self.depth = depth
        self.base_channels = base_channels
        self.input_size = (int(input_size[0]), int(input_size[1]))
        self.params = params

    def __repr__(self):
        return (
            f"UNetModel(depth={self.depth}, base_channels={self.base_channels}, "
            f"input_size={self.input_size}, n_params={self.n_parameters()})"
        )

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[k], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _conv(self, x, name, padding=1):
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=padding)

    def _block(self, x, name):
        x = T.relu(self._conv(x, f"{name}.conv1"))
        return T.relu(self._conv(x, f"{name}.conv2"))

    def forward(self, x: T.Tensor) -> T.Tensor:
        """Soft mask [N,1,H,W] for input [N,1,H,W]; H, W divisible by 2**(depth-1)."""
        div = 2 ** (self.depth - 1)
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected [N,1,H,W] input, got {x.shape}")
        if x.shape[2] % div or x.shape[3] % div:
            raise IndivisibleInput(f"extents {x.shape[2:]} not divisible by {div}")
        skips = []
        for lvl in range(1, self.depth + 1):
            x = self._block(x, f"enc{lvl}")
            if lvl < self.depth:
                skips.append(x)
                x = T.max_pool2d(x)
        for lvl in range(self.depth - 1, 0, -1):
            x = T.concat_channels(T.upsample2x(x), skips[lvl - 1])
            x = self._block(x, f"dec{lvl}")
        return T.sigmoid(self._conv(x, "head", padding=0))

    __call__ = forward


def build_unet(depth: int = 4, base_channels: int = 16, input_size=(80, 80), seed: int = 0, dtype=np.float32) -> UNetModel:
    if depth < 2:
        raise ValueError("depth must be >= 2")
    if base_channels < 1:
        raise ValueError("base_channels must be >= 1")
    h, w = input_size
    div = 2 ** (depth - 1)
    if h % div or w % div:
        raise IndivisibleInput(f"input {h}x{w} not divisible by 2**(depth-1) = {div}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(depth, base_channels).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            data = np.zeros(shape)
        params[name] = T.Tensor(data.astype(dtype), requires_grad=True)
    return UNetModel(depth, base_channels, (h, w), params)


def predict_batch(model: UNetModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Soft masks for a stack of slices shaped [N, H, W]."""
    images = np.asarray(images)
    out = np.empty(images.shape, dtype=np.float32)
    dtype = model.parameters()[0].dtype
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size, None].astype(dtype)
            out[start:start + batch_size] = model.forward(T.Tensor(chunk)).data[:, 0]
    return out


def predict(model: UNetModel, img: np.ndarray) -> np.ndarray:
    """Soft mask for one normalised slice of extent ``model.input_size``."""
    img = np.asarray(img)
    if img.shape != model.input_size:
        raise ShapeMismatch(f"slice {img.shape} vs model input {model.input_size}")
    return predict_batch(model, img[None])[0]


def apply_soft_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise ShapeMismatch(f"image {img.shape} vs mask {mask.shape}")
    return (img * mask).astype(np.float32)


def binarize(mask: np.ndarray, level: float = 0.5) -> np.ndarray:
    if not 0.0 <= level <= 1.0:
        raise ValueError("binarize level must lie in [0, 1]")
    return (np.asarray(mask) >= level).astype(np.uint8)


# checkpoints ---------------------------------------------------------------

def encode_checkpoint(model: UNetModel) -> bytes:
    h, w = model.input_size
    parts = [CHECKPOINT_MAGIC, struct.pack("<5I", CHECKPOINT_VERSION, model.depth, model.base_channels, h, w)]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.shape))
        parts.append(np.asarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: UNetModel, path) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(model))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def decode_checkpoint(blob: bytes) -> UNetModel:
    if len(blob) < 24 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("missing SKST magic")
    version, depth, base, h, w = struct.unpack_from("<5I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        expected = parameter_shapes(depth, base)
        model = build_unet(depth, base, (h, w))
    except (ValueError, IndivisibleInput) as exc:
        raise CorruptCheckpoint(f"bad architecture record: {exc}") from exc
    pos = 24
    seen = []
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise CorruptCheckpoint("truncated parameter name")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            if expected.get(name) != tuple(shape):
                raise CorruptCheckpoint(f"unexpected parameter {name} with shape {shape}")
            count = int(np.prod(shape))
            if pos + 4 * count > len(blob):
                raise CorruptCheckpoint(f"truncated payload for {name}")
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            model.params[name].data = data.astype(np.float32)
            seen.append(name)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"truncated or garbled checkpoint: {exc}") from exc
    if seen != list(expected):
        raise CorruptCheckpoint("parameter list does not match the architecture")
    return model


def load_checkpoint(path) -> UNetModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(blob)
