"""Binary tensor-archive checkpoints.

Layout (all integers u32 little-endian)::

    b"AXTN" | version | record count
    per record: name length | UTF-8 name | rank | dims... | raw f32 LE data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AXTN"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointFormatError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(buf):
            raise CheckpointFormatError(f"{path}: truncated name at byte {pos}")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointFormatError(f"{path}: record {name!r} truncated at byte {pos}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
