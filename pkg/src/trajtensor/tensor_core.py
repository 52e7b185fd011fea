"""Trajectory-tensor encoding.

Bounding boxes are normalized to [0, 1] with the origin at the top-left,
x to the right and y downward. A heatmap has shape ``(w, h)`` and is indexed
``hm[gx, gy]``; a trajectory tensor has shape ``(k, t, w, h)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage


class UndefinedCentroidError(ValueError):
    """Raised when the centroid of an all-zero heatmap is requested."""


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"bounding box coordinates must lie in [0, 1]: {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate bounding box (zero area): {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def _floor_scaled(v: float, n: int) -> int:
    # exact floor(v * n) for a float v, avoiding rounding in the product
    p, q = v.as_integer_ratio()
    return (p * n) // q


def _ceil_scaled(v: float, n: int) -> int:
    p, q = v.as_integer_ratio()
    return -((-p * n) // q)


def _cell_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Inclusive cell range whose interiors intersect the open interval (lo, hi)."""
    first = _floor_scaled(lo, n)
    last = _ceil_scaled(hi, n) - 1
    return max(first, 0), min(last, n - 1)


def bbox_to_heatmap(bbox: BoundingBox, w: int, h: int) -> np.ndarray:
    """Binary ``(w, h)`` occupancy grid of the cells the box overlaps with positive area."""
    if w < 1 or h < 1:
        raise ValueError(f"heatmap dimensions must be >= 1, got {w}x{h}")
    if not isinstance(bbox, BoundingBox):
        raise TypeError(f"expected BoundingBox, got {type(bbox).__name__}")
    gx0, gx1 = _cell_span(bbox.x1, bbox.x2, w)
    gy0, gy1 = _cell_span(bbox.y1, bbox.y2, h)
    hm = np.zeros((w, h), dtype=np.float64)
    hm[gx0:gx1 + 1, gy0:gy1 + 1] = 1.0
    return hm


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_smooth(hm: np.ndarray, sigma: float) -> np.ndarray:
    """Zero-padded Gaussian blur, rescaled so the peak matches the input peak.

    The kernel is truncated at radius ``ceil(3 * sigma)``. ``sigma == 0``
    returns the heatmap unchanged.
    """
    if sigma < 0 or not math.isfinite(sigma):
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    hm = np.asarray(hm, dtype=np.float64)
    if sigma == 0:
        return hm.copy()
    peak = hm.max(initial=0.0)
    if peak <= 0:
        return np.zeros_like(hm)
    out = ndimage.correlate(hm, gaussian_kernel(sigma), mode="constant", cval=0.0)
    return np.clip(out * (peak / out.max()), 0.0, 1.0)


Track = Sequence[Optional[BoundingBox]]


def build_trajectory_tensor(
    tracks: Mapping[int, Track] | Sequence[Track],
    k: int,
    t: int,
    w: int,
    h: int,
    sigma: float = 0.0,
) -> np.ndarray:
    """Stack per-camera heatmap sequences into a ``(k, t, w, h)`` tensor.

    ``tracks`` maps 1-based camera indices to length-``t`` sequences of
    optional boxes; a plain sequence is read as cameras ``1..len(tracks)``.
    Cameras or timesteps without a box get an all-zero heatmap.
    """
    if isinstance(tracks, Mapping):
        items = tracks.items()
    else:
        items = enumerate(tracks, start=1)
    z = np.zeros((k, t, w, h), dtype=np.float64)
    for cam, track in items:
        if not 1 <= cam <= k:
            raise ValueError(f"camera index {cam} outside 1..{k}")
        if len(track) != t:
            raise ValueError(f"camera {cam}: expected {t} timesteps, got {len(track)}")
        for tau, box in enumerate(track):
            if box is not None:
                z[cam - 1, tau] = gaussian_smooth(bbox_to_heatmap(box, w, h), sigma)
    return z


def center_of_mass(hm: np.ndarray, image_w: float, image_h: float) -> tuple[float, float]:
    """Value-weighted mean of cell centers, in image pixels."""
    hm = np.asarray(hm, dtype=np.float64)
    w, h = hm.shape
    mass = hm.sum()
    if not mass > 0:
        raise UndefinedCentroidError("heatmap has no mass")
    cx = (np.arange(w) + 0.5) * (image_w / w)
    cy = (np.arange(h) + 0.5) * (image_h / h)
    x = float(hm.sum(axis=1) @ cx / mass)
    y = float(hm.sum(axis=0) @ cy / mass)
    return x, y


# --- TTEN binary tensor files ------------------------------------------------

TTEN_MAGIC = b"TTEN"
TTEN_VERSION = 1


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    header = TTEN_MAGIC + bytes([TTEN_VERSION, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != TTEN_MAGIC:
        raise ValueError("not a TTEN tensor (bad magic)")
    if buf[4] != TTEN_VERSION:
        raise ValueError(f"unsupported TTEN version {buf[4]}")
    rank = buf[5]
    off = 6 + 4 * rank
    if len(buf) < off:
        raise ValueError("truncated TTEN header")
    dims = struct.unpack(f"<{rank}I", buf[6:off])
    count = math.prod(dims)
    if len(buf) != off + 4 * count:
        raise ValueError(f"TTEN payload has {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
