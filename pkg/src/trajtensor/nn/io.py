"""TTWT weight files: named float32 blocks, little-endian.

Layout: ``b"TTWT"``, version byte, u32 block count, then per block a u32
name length, UTF-8 name, u8 rank, rank x u32 dims and the row-major values.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TTWT"
VERSION = 1


def weights_to_bytes(blocks: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def weights_from_bytes(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ValueError("not a TTWT weight file (bad magic)")
    if len(buf) < 9:
        raise ValueError("truncated TTWT header")
    if buf[4] != VERSION:
        raise ValueError(f"unsupported TTWT version {buf[4]}")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            rank = buf[off]
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = math.prod(dims)
            if off + 4 * size > len(buf):
                raise ValueError(f"block {name!r} truncated")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 4 * size
    except (struct.error, IndexError) as exc:
        raise ValueError("truncated TTWT file") from exc
    if off != len(buf):
        raise ValueError(f"{len(buf) - off} trailing bytes in TTWT file")
    return out


def save_weights(path: str | Path, blocks: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(weights_to_bytes(blocks))


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    return weights_from_bytes(Path(path).read_bytes())
