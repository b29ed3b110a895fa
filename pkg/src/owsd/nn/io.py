"""Binary artifact framing.

``OWTN`` frames one float64 tensor::

    b"OWTN" | version u32 | rank u32 | dims u32 * rank | dtype u8 (0) | data

Model containers (keys, encoders, cloud models, inference networks) share
one layout, distinguished by their four-byte magic::

    magic | version u32 | seed u64 | id_len u32 | id utf-8
          | header_len u32 | header (canonical JSON) | OWTN tensors to EOF

All integers are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from ..errors import FormatError

TENSOR_MAGIC = b"OWTN"
VERSION = 1
DTYPE_F64 = 0


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", DTYPE_F64))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8, "tensor header"))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "tensor dims"))
    (dtype,) = struct.unpack("<B", _read_exact(fh, 1, "dtype"))
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    count = int(np.prod(dims)) if rank else 1
    data = _read_exact(fh, 8 * count, "tensor data")
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def container_to_bytes(
    magic: bytes, seed: int, ident: str, header: str, tensors: Sequence[np.ndarray]
) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be four bytes")
    buf = io.BytesIO()
    ident_b = ident.encode("utf-8")
    header_b = header.encode("utf-8")
    buf.write(magic)
    buf.write(struct.pack("<IQ", VERSION, seed))
    buf.write(struct.pack("<I", len(ident_b)) + ident_b)
    buf.write(struct.pack("<I", len(header_b)) + header_b)
    for t in tensors:
        write_tensor(buf, t)
    return buf.getvalue()


def container_from_bytes(data: bytes, magic: bytes):
    """Returns ``(seed, ident, header_json, tensors)``."""
    fh = io.BytesIO(data)
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"expected magic {magic!r}, got {got!r}")
    version, seed = struct.unpack("<IQ", _read_exact(fh, 12, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    (n,) = struct.unpack("<I", _read_exact(fh, 4, "id length"))
    ident = _read_exact(fh, n, "id").decode("utf-8")
    (n,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    header = _read_exact(fh, n, "header json").decode("utf-8")
    tensors = []
    while fh.tell() < len(data):
        tensors.append(read_tensor(fh))
    return seed, ident, header, tensors


VOLATILE_META = ("wall_clock_s",)


def stable_meta(meta: dict) -> dict:
    """Metadata minus run-dependent timings, so equal seeds give equal artifact bytes."""
    return {k: v for k, v in meta.items() if k not in VOLATILE_META}
