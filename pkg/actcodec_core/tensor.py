"""
Activation tensors, block partitioning and the ATCT tensor file format.

Memory layout is channel-major per pixel: element (h, w, c) lives at flat
index (h * width + w) * channels + c, i.e. a C-ordered (H, W, C) array.
A 1x1xC block is therefore one contiguous row of ``data.reshape(-1, C)``.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from actcodec_core.errors import (
    BadMagic,
    NonFinite,
    Truncated,
    UnsupportedDtype,
    ValidationError,
    VersionMismatch,
    FormatError,
)
from actcodec_core.fileio import atomic_write_bytes

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"ATCT"
TENSOR_VERSION = 1
DTYPE_F32 = 0
# magic, version, dtype, height, width, channels
_HEADER = struct.Struct("<4sHHIII")


@dataclass(frozen=True)
class ActivationTensor:
    """Dense H x W x C float32 tensor, the unit of layer output."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"activation tensor must be H x W x C, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NonFinite("activation tensor contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, height, width, channels, values):
        values = np.asarray(values, dtype=np.float32)
        if values.size != height * width * channels:
            raise ValidationError(
                f"expected {height * width * channels} values, got {values.size}"
            )
        return cls(values.reshape(height, width, channels))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def dims(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def channel_means(self) -> np.ndarray:
        return self.data.reshape(-1, self.channels).mean(axis=0, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, ActivationTensor):
            return NotImplemented
        return self.dims == other.dims and self.data.tobytes() == other.data.tobytes()

    __hash__ = None


@dataclass(frozen=True)
class BlockShape:
    bw: int
    bh: int
    bc: int

    def __post_init__(self):
        for name in ("bw", "bh", "bc"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f"block extent {name} must be a positive integer, got {value}")
            object.__setattr__(self, name, int(value))

    @property
    def n(self) -> int:
        return self.bw * self.bh * self.bc

    @property
    def is_channel_vector(self) -> bool:
        return self.bw == 1 and self.bh == 1

    @classmethod
    def parse(cls, text):
        """Parse ``"1x1x64"`` (bw x bh x bc) or a 3-sequence."""
        if isinstance(text, str):
            parts = text.lower().split("x")
        else:
            parts = list(text)
        if len(parts) != 3:
            raise ValidationError(f"block shape needs three extents, got {text!r}")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError as exc:
            raise ValidationError(f"bad block shape {text!r}") from exc

    def __str__(self):
        return f"{self.bw}x{self.bh}x{self.bc}"


@dataclass(frozen=True)
class PaddingPolicy:
    # Per-channel fill values for out-of-range spatial positions; padded
    # channels beyond C are always zero.
    fill: Optional[np.ndarray]
    padded_slots: int


@dataclass(frozen=True)
class BlockSequence:
    """Blocks in row-major block-grid order (height, width, channel-group),
    channel-group fastest; inside a block elements run (bh, bw, bc), channel
    fastest."""

    blocks: np.ndarray
    dims: tuple
    shape: BlockShape
    padding: PaddingPolicy

    @property
    def grid(self):
        height, width, channels = self.dims
        return (-(-height // self.shape.bh), -(-width // self.shape.bw), -(-channels // self.shape.bc))

    def __len__(self):
        return self.blocks.shape[0]


def partition(t: ActivationTensor, shape: BlockShape, fill=None) -> BlockSequence:
    """Cut ``t`` into non-overlapping ``shape`` blocks, padding the edges."""
    height, width, channels = t.dims
    gh, gw, gc = -(-height // shape.bh), -(-width // shape.bw), -(-channels // shape.bc)
    ph, pw, pc = gh * shape.bh, gw * shape.bw, gc * shape.bc

    if fill is not None:
        fill = np.asarray(fill, dtype=np.float32).reshape(-1)
        if fill.size != channels:
            raise ValidationError(f"padding fill needs {channels} values, got {fill.size}")

    if (ph, pw, pc) == (height, width, channels):
        padded = t.data
    else:
        padded = np.zeros((ph, pw, pc), dtype=np.float32)
        if fill is not None:
            padded[:, :, :channels] = fill
        padded[:height, :width, :channels] = t.data

    blocks = (
        padded.reshape(gh, shape.bh, gw, shape.bw, gc, shape.bc)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(gh * gw * gc, shape.n)
    )
    slots = ph * pw * pc - height * width * channels
    return BlockSequence(
        blocks=blocks,
        dims=(height, width, channels),
        shape=shape,
        padding=PaddingPolicy(fill=fill, padded_slots=slots),
    )


def reassemble(b: BlockSequence) -> ActivationTensor:
    """Inverse of :func:`partition`; padding slots are discarded."""
    height, width, channels = b.dims
    shape = b.shape
    gh, gw, gc = b.grid
    blocks = np.asarray(b.blocks)
    if blocks.ndim != 2 or blocks.shape != (gh * gw * gc, shape.n):
        raise ValidationError(
            f"expected {gh * gw * gc} blocks of length {shape.n}, got array of shape {blocks.shape}"
        )
    padded = (
        blocks.astype(np.float32, copy=False)
        .reshape(gh, gw, gc, shape.bh, shape.bw, shape.bc)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(gh * shape.bh, gw * shape.bw, gc * shape.bc)
    )
    return ActivationTensor(padded[:height, :width, :channels])


# ---------------------------------------------------------------------------
# ATCT file format
# ---------------------------------------------------------------------------

def tensor_to_bytes(t: ActivationTensor) -> bytes:
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_F32, *t.dims)
    return header + t.data.astype("<f4", copy=False).tobytes()


def tensor_from_bytes(raw: bytes) -> ActivationTensor:
    if len(raw) < 4 or raw[:4] != TENSOR_MAGIC:
        raise BadMagic(f"not an ATCT tensor file (magic {bytes(raw[:4])!r})")
    if len(raw) < _HEADER.size:
        raise Truncated("tensor header is truncated")
    _, version, dtype, height, width, channels = _HEADER.unpack_from(raw)
    if version != TENSOR_VERSION:
        raise VersionMismatch(f"tensor file version {version}, expected {TENSOR_VERSION}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtype(f"tensor dtype code {dtype} is not supported")
    if min(height, width, channels) < 1:
        raise FormatError(f"tensor dims must be positive, got {(height, width, channels)}")
    expected = height * width * channels * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise Truncated(f"tensor payload has {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after tensor payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.isfinite(values).all():
        raise NonFinite("tensor file contains NaN or Inf")
    return ActivationTensor(values.reshape(height, width, channels))


def save_tensor(t: ActivationTensor, path):
    atomic_write_bytes(path, tensor_to_bytes(t))
    logger.debug("saved %s tensor to %s", "x".join(map(str, t.dims)), path)


def load_tensor(path) -> ActivationTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    return tensor_from_bytes(raw)
