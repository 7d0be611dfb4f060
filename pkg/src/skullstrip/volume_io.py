"""Volume ingestion: a minimal NIfTI-1 reader/writer and a plain text format.

Only uncompressed single-file NIfTI-1 (``n+1``) with uint8, int16 or float32
voxels is understood.  Orientation fields are carried through untouched in
``Volume.header_bytes``; nothing here interprets them.

Voxel arrays are held with shape ``dims`` = (x, y, z[, t]) where x varies
fastest on disk.  A 2D slice handed to the image routines is indexed
``[row, col]`` = ``[y, x]``, so ``extract_slices`` transposes each plane.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    IndexOutOfRange,
    InvalidVolume,
    IoFailure,
    MalformedHeader,
    ShapeMismatch,
    TruncatedData,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {
    DT_UINT8: np.dtype("<u1"),
    DT_INT16: np.dtype("<i2"),
    DT_FLOAT32: np.dtype("<f4"),
}

# byte offsets into the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_SCL_INTER = 116
_OFF_XYZT_UNITS = 123
_OFF_MAGIC = 344


@dataclass(frozen=True)
class Volume:
    """A 3D or 4D voxel grid with spacing and the raw source header."""

    dims: tuple[int, ...]
    voxel_size: tuple[float, ...]
    data: np.ndarray
    header_bytes: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (3, 4):
            raise InvalidVolume(f"volume must be 3D or 4D, got dims {dims}")
        if any(d < 1 for d in dims):
            raise InvalidVolume(f"all dims must be >= 1, got {dims}")
        # spacing is stored as float32 on disk; hold it at that precision
        vs = tuple(float(np.float32(v)) for v in self.voxel_size)
        if len(vs) != len(dims):
            raise InvalidVolume(f"voxel_size {vs} does not match dims {dims}")
        if any(not v > 0 for v in vs):
            raise InvalidVolume(f"voxel_size components must be > 0, got {vs}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.size != int(np.prod(dims)):
            raise InvalidVolume(
                f"data has {data.size} values but dims {dims} need {int(np.prod(dims))}"
            )
        data = data.reshape(dims, order="F") if data.shape != dims else data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "data", data)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def n_slices(self) -> int:
        return self.dims[2]

    @property
    def n_frames(self) -> int:
        return self.dims[3] if self.ndim == 4 else 1

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry and header, new voxel values."""
        return Volume(self.dims, self.voxel_size, data, self.header_bytes)

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.allclose(self.voxel_size, other.voxel_size)


def _get(fmt: str, buf: bytes, offset: int):
    return struct.unpack_from("<" + fmt, buf, offset)


def read_nifti(path) -> Volume:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = _get("i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise MalformedHeader(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348")
    if raw[_OFF_MAGIC:_OFF_MAGIC + 4] != MAGIC:
        raise MalformedHeader(f"{path}: bad magic {raw[_OFF_MAGIC:_OFF_MAGIC + 4]!r}")

    dim = _get("8h", raw, _OFF_DIM)
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise MalformedHeader(f"{path}: dim[0] = {ndim}")
    extents = [int(d) for d in dim[1:ndim + 1]]
    if any(d < 1 for d in extents):
        raise MalformedHeader(f"{path}: non-positive extent in {extents}")
    # singleton axes beyond t are folded away; 1D/2D images are padded to 3D
    while len(extents) > 4 and extents[-1] == 1:
        extents.pop()
    if len(extents) > 4:
        raise MalformedHeader(f"{path}: only 3D/4D volumes are supported, got {extents}")
    while len(extents) < 3:
        extents.append(1)

    (datatype,) = _get("h", raw, _OFF_DATATYPE)
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype}")
    dtype = _DTYPES[datatype]

    pixdim = _get("8f", raw, _OFF_PIXDIM)
    spacing = []
    for k in range(len(extents)):
        v = abs(float(pixdim[k + 1]))
        spacing.append(v if v > 0 else 1.0)

    (vox_offset,) = _get("f", raw, _OFF_VOX_OFFSET)
    offset = int(vox_offset)
    if offset < DEFAULT_VOX_OFFSET:
        raise MalformedHeader(f"{path}: vox_offset {vox_offset} < 352")
    count = int(np.prod(extents))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedData(f"{path}: need {need} bytes, file has {len(raw)}")

    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.float32)
    slope, inter = _get("2f", raw, _OFF_SCL_SLOPE)
    if slope != 0 and np.isfinite(slope):
        values = (values * np.float32(slope) + np.float32(inter)).astype(np.float32)

    return Volume(
        dims=tuple(extents),
        voxel_size=tuple(spacing),
        data=values.reshape(extents, order="F"),
        header_bytes=bytes(raw[:HEADER_SIZE]),
    )


def _fresh_header() -> bytearray:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<B", hdr, 38, ord("r"))
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into("<B", hdr, _OFF_XYZT_UNITS, 2 | 8)  # mm, seconds
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC
    return hdr


def encode_nifti(vol: Volume) -> bytes:
    """Serialise ``vol`` as a float32 single-file NIfTI-1 byte string."""
    if vol.header_bytes is not None and len(vol.header_bytes) >= HEADER_SIZE:
        hdr = bytearray(vol.header_bytes[:HEADER_SIZE])
    else:
        hdr = _fresh_header()
    dims = list(vol.dims) + [1] * (7 - len(vol.dims))
    struct.pack_into("<8h", hdr, _OFF_DIM, len(vol.dims), *dims)
    struct.pack_into("<h", hdr, _OFF_DATATYPE, DT_FLOAT32)
    struct.pack_into("<h", hdr, _OFF_BITPIX, 32)
    pixdim = list(_get("8f", hdr, _OFF_PIXDIM))
    if pixdim[0] not in (-1.0, 1.0):
        pixdim[0] = 1.0
    for k, v in enumerate(vol.voxel_size):
        pixdim[k + 1] = v
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, *pixdim)
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(DEFAULT_VOX_OFFSET))
    # values are stored already scaled
    struct.pack_into("<2f", hdr, _OFF_SCL_SLOPE, 1.0, 0.0)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = MAGIC
    payload = np.asarray(vol.data, dtype="<f4").tobytes(order="F")
    return bytes(hdr) + b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE) + payload


def write_nifti(vol: Volume, path) -> None:
    if not isinstance(vol, Volume):
        raise InvalidVolume("write_nifti expects a Volume")
    blob = encode_nifti(vol)
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# -- plain text format -------------------------------------------------------

PLAIN_TAG = "P5-like:"


def read_plain(path) -> Volume:
    """Read the hand-writable text format.

    First line ``P5-like: width height depth``; then ``width*height*depth``
    whitespace-separated decimals, x fastest, then y, then z.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    head, _, body = text.partition("\n")
    parts = head.split()
    if len(parts) != 4 or parts[0] != PLAIN_TAG:
        raise MalformedHeader(f"{path}: expected '{PLAIN_TAG} width height depth'")
    try:
        dims = tuple(int(p) for p in parts[1:])
        values = np.array([float(tok) for tok in body.split()], dtype=np.float32)
    except ValueError as exc:
        raise MalformedHeader(f"{path}: {exc}") from exc
    if values.size < int(np.prod(dims)):
        raise TruncatedData(f"{path}: need {int(np.prod(dims))} values, found {values.size}")
    return Volume(dims, (1.0, 1.0, 1.0), values[: int(np.prod(dims))])


def write_plain(vol: Volume, path) -> None:
    if vol.ndim != 3:
        raise InvalidVolume("plain format holds 3D volumes only")
    w, h, d = vol.dims
    lines = [f"{PLAIN_TAG} {w} {h} {d}"]
    for z in range(d):
        for y in range(h):
            lines.append(" ".join(repr(float(v)) for v in vol.data[:, y, z]))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_volume(path) -> Volume:
    """Dispatch on content: NIfTI-1 unless the file starts with the plain tag."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            start = fh.read(len(PLAIN_TAG))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if start == PLAIN_TAG.encode():
        return read_plain(path)
    return read_nifti(path)


# -- slicing -----------------------------------------------------------------

def extract_slices(vol: Volume, time_index: int | None = None) -> list[np.ndarray]:
    """Split a volume into 2D float32 slices of shape (y, x).

    For 4D input without ``time_index`` every (z, t) pair is returned,
    frame by frame (all z of t=0, then all z of t=1, ...).
    """
    if vol.ndim == 3:
        if time_index not in (None, 0):
            raise IndexOutOfRange(f"time_index {time_index} given for a 3D volume")
        frames = [vol.data]
    elif time_index is None:
        frames = [vol.data[..., t] for t in range(vol.n_frames)]
    else:
        if not 0 <= time_index < vol.n_frames:
            raise IndexOutOfRange(f"time_index {time_index} outside 0..{vol.n_frames - 1}")
        frames = [vol.data[..., time_index]]
    return [np.ascontiguousarray(f[:, :, z].T) for f in frames for z in range(f.shape[2])]


def assemble_mask_volume(masks: Sequence[np.ndarray], template: Volume) -> Volume:
    """Stack per-slice (y, x) masks back into a volume on ``template``'s grid.

    One mask per z gives a 3D volume; one mask per (z, t) of a 4D template,
    in ``extract_slices`` order, gives a 4D volume.
    """
    nx, ny, nz = template.dims[:3]
    if len(masks) == nz:
        dims = (nx, ny, nz)
    elif template.ndim == 4 and len(masks) == nz * template.n_frames:
        dims = template.dims
    else:
        raise ShapeMismatch(f"{len(masks)} masks for a template with {nz} slices")
    out = np.zeros(dims, dtype=np.float32)
    for k, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape != (ny, nx):
            raise ShapeMismatch(f"mask {k} has shape {m.shape}, expected {(ny, nx)}")
        z, t = k % nz, k // nz
        plane = (m != 0).astype(np.float32).T
        if len(dims) == 4:
            out[:, :, z, t] = plane
        else:
            out[:, :, z] = plane
    return Volume(dims, template.voxel_size[: len(dims)], out, template.header_bytes)


def remove_quietly(*paths) -> None:
    for p in paths:
        try:
            os.remove(p)
        except OSError:
            pass
