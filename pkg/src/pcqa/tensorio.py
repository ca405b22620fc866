"""PCQT raw tensor files: magic ``PCQT``, u16 version, u8 rank, rank x u32
dims, then a little-endian payload.  The payload is f32 or f64; the reader
tells them apart by payload length."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCQT"
VERSION = 1


class BadMagic(ValueError):
    pass


def dumps(array: np.ndarray, dtype="f8") -> bytes:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt.kind != "f" or dt.itemsize not in (4, 8):
        raise ValueError("PCQT stores f32 or f64 only")
    a = np.asarray(array, dtype=dt)  # keeps 0-d shapes; tobytes() writes C order
    head = MAGIC + struct.pack("<HB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def loads(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise BadMagic("not a PCQT tensor")
    version, rank = struct.unpack_from("<HB", data, 4)
    if version != VERSION:
        raise BadMagic(f"unsupported PCQT version {version}")
    dims = struct.unpack_from(f"<{rank}I", data, 7)
    start = 7 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    payload = len(data) - start
    if payload == 4 * count:
        dt = np.dtype("<f4")
    elif payload == 8 * count:
        dt = np.dtype("<f8")
    else:
        raise BadMagic("PCQT payload length does not match its shape")
    return np.frombuffer(data, dt, count, start).reshape(dims).copy()


def save(path, array: np.ndarray, dtype="f8") -> None:
    Path(path).write_bytes(dumps(array, dtype))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
