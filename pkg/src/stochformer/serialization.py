"""Little-endian binary tensor records and named-tensor containers.

Tensor record::

    b"STXT" | u32 rank | u64 dim * rank | f64 value * prod(dims)

Container::

    b"STXN" | u32 count | (u32 name_len | utf-8 name | tensor record) * count
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import DataLoadError

TENSOR_MAGIC = b"STXT"
CONTAINER_MAGIC = b"STXN"


def write_tensor(stream, array) -> None:
    arr = np.array(array, dtype="<f8", order="C")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    stream.write(arr.tobytes(order="C"))


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise DataLoadError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(stream) -> np.ndarray:
    magic = _read_exact(stream, 4)
    if magic != TENSOR_MAGIC:
        raise DataLoadError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(stream, 8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def write_named(stream, named: dict) -> None:
    stream.write(CONTAINER_MAGIC)
    stream.write(struct.pack("<I", len(named)))
    for name, array in named.items():
        raw = name.encode("utf-8")
        stream.write(struct.pack("<I", len(raw)))
        stream.write(raw)
        write_tensor(stream, array)


def read_named(stream) -> dict:
    magic = _read_exact(stream, 4)
    if magic != CONTAINER_MAGIC:
        raise DataLoadError(f"bad container magic {magic!r}")
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(stream, 4))
        name = _read_exact(stream, n).decode("utf-8")
        out[name] = read_tensor(stream)
    return out
