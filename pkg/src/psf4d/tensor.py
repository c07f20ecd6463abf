"""Dense float tensors: creation from addressed streams and a small
self-describing binary file format.

All in-memory math in this package runs on float64 numpy arrays in C
order. Float32 exists only at the serialization boundary, as a smaller
on-disk representation; loading one upcasts back to float64 (exact).

File layout, all little endian, no padding, no compression:

    offset  size      field
    0       6         magic bytes "PSF4D\\x00"
    6       2         format version, u16 (currently 1)
    8       1         dtype tag, u8: 0 = float64, 1 = float32
    9       1         rank, u8
    10      8 * rank  axis lengths, u64 each
    ...     payload   row-major element bytes

A file is rejected with a distinct error for a wrong magic, an
unsupported version, or a payload shorter than the header promises;
trailing bytes beyond the payload are also an error.
"""

from __future__ import annotations

import struct

import numpy as np

from .exceptions import (
    FormatError,
    MagicMismatchError,
    ParameterError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .rng import RngState

MAGIC = b"PSF4D\x00"
FORMAT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_FOR_NAME = {"f64": 0, "f32": 1}
_MAX_RANK = 32


def standard_normal(shape, rng: RngState) -> np.ndarray:
    """Draw i.i.d. N(0, 1) float64 values, advancing ``rng``.

    Successive calls on the same state continue its sequence; equal
    (seed, stream) pairs reproduce the same values in the same order.
    """
    if not isinstance(rng, RngState):
        raise ParameterError("rng must be an RngState")
    shape = _as_shape(shape)
    return rng.generator.standard_normal(size=shape, dtype=np.float64)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    try:
        shape = tuple(int(s) for s in shape)
    except TypeError:
        raise ShapeError(f"shape must be an int or a sequence of ints, got {shape!r}")
    if any(s < 0 for s in shape):
        raise ShapeError(f"shape {shape} has a negative axis")
    return shape


def save_tensor(path, array, dtype: str = "f64") -> None:
    """Write ``array`` to ``path`` in the binary tensor format.

    dtype "f64" round-trips bit for bit; "f32" narrows the payload and is
    lossy for values that do not fit a float32.
    """
    if dtype not in _TAG_FOR_NAME:
        raise ParameterError(f"dtype must be 'f64' or 'f32', got {dtype!r}")
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim > _MAX_RANK:
        raise ShapeError(f"rank {arr.ndim} exceeds the format maximum {_MAX_RANK}")
    tag = _TAG_FOR_NAME[dtype]
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, tag, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload)


def load_tensor(path) -> np.ndarray:
    """Read a tensor file back as a float64 array in C order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return loads_tensor(blob)


def loads_tensor(blob: bytes) -> np.ndarray:
    """Decode the binary tensor format from an in-memory byte string."""
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError(
            f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}"
        )
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedPayloadError("file ends inside the fixed header")
    version, tag, rank = struct.unpack_from("<HBB", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format version {version}, this reader handles {FORMAT_VERSION}"
        )
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    if rank > _MAX_RANK:
        raise FormatError(f"rank {rank} exceeds the format maximum {_MAX_RANK}")
    offset = len(MAGIC) + 4
    if len(blob) < offset + 8 * rank:
        raise TruncatedPayloadError("file ends inside the axis-length table")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
    offset += 8 * rank
    dt = _DTYPE_TAGS[tag]
    count = 1
    for s in shape:
        count *= s
    expected = count * dt.itemsize
    got = len(blob) - offset
    if got < expected:
        raise TruncatedPayloadError(
            f"payload holds {got} bytes, header promises {expected}"
        )
    if got > expected:
        raise FormatError(f"{got - expected} trailing bytes after the payload")
    flat = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    return flat.reshape(shape).astype(np.float64)


def read_header(path) -> dict:
    """Header fields of a tensor file without touching the payload."""
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 4 + 8 * _MAX_RANK)
    if len(head) < len(MAGIC) or head[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError("bad magic")
    if len(head) < len(MAGIC) + 4:
        raise TruncatedPayloadError("file ends inside the fixed header")
    version, tag, rank = struct.unpack_from("<HBB", head, len(MAGIC))
    offset = len(MAGIC) + 4
    if len(head) < offset + 8 * rank:
        raise TruncatedPayloadError("file ends inside the axis-length table")
    shape = struct.unpack_from(f"<{rank}Q", head, offset) if rank else ()
    return {
        "version": version,
        "dtype": {0: "f64", 1: "f32"}.get(tag, f"unknown({tag})"),
        "shape": tuple(shape),
    }
