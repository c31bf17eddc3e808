"""Binary parameter checkpoints.

Layout (all integers little-endian):
    magic  b"LSNWM1"
    version        u32
    group count    u32
  per named group:
    name length    u32, then UTF-8 name bytes
    rank           u32
    axis lengths   u64 each
    payload        float64 little-endian, C order
    crc32          u32 over the payload bytes
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "VERSION"]

MAGIC = b"LSNWM1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed checkpoint file or failed CRC."""


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        data = np.asarray(arr, dtype="<f8")
        if not data.flags["C_CONTIGUOUS"]:
            data = data.copy(order="C")
        payload = data.tobytes()
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", data.ndim)
        buf += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
        buf += payload
        buf += struct.pack("<I", zlib.crc32(payload))
    path.write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    off = len(MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated file")
        vals = struct.unpack_from(fmt, view, off)
        off += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if off + name_len > len(raw):
            raise CheckpointError(f"{path}: truncated file")
        name = bytes(view[off : off + name_len]).decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        nbytes = n * 8
        if off + nbytes + 4 > len(raw):
            raise CheckpointError(f"{path}: truncated file")
        payload = bytes(view[off : off + nbytes])
        off += nbytes
        (crc,) = take("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: CRC mismatch for group {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays
