"""Binary grid formats shared by the support cache, masks and feature caches.

All integers and floats are little-endian; arrays are row-major.

* real grid:   ``<II`` (h, w) header, then h*w float32
* mask grid:   ``<II`` (h, w) header, then h rows of ceil(w/8) packed bytes (MSB first)
* feature map: ``<IIII`` (H', W', D, crc32 of payload) header, then H'*W'*D float32
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]

GRID_HEADER = struct.Struct("<II")
FEATURE_HEADER = struct.Struct("<IIII")


class ChecksumError(ValueError):
    """Stored data does not match its recorded checksum."""


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    return sha256_bytes(Path(path).read_bytes())


def encode_grid(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {values.shape}")
    h, w = values.shape
    return GRID_HEADER.pack(h, w) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_grid(data: bytes) -> np.ndarray:
    if len(data) < GRID_HEADER.size:
        raise ChecksumError("truncated grid header")
    h, w = GRID_HEADER.unpack_from(data)
    body = data[GRID_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ChecksumError(f"grid payload is {len(body)} bytes, expected {4 * h * w}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def encode_mask(mask: np.ndarray) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    return GRID_HEADER.pack(h, w) + np.packbits(mask, axis=1, bitorder="big").tobytes()


def decode_mask(data: bytes) -> np.ndarray:
    if len(data) < GRID_HEADER.size:
        raise ChecksumError("truncated mask header")
    h, w = GRID_HEADER.unpack_from(data)
    row_bytes = (w + 7) // 8
    body = data[GRID_HEADER.size:]
    if len(body) != h * row_bytes:
        raise ChecksumError(f"mask payload is {len(body)} bytes, expected {h * row_bytes}")
    packed = np.frombuffer(body, dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(packed, axis=1, count=w, bitorder="big").astype(bool)


def encode_feature_map(features: np.ndarray) -> bytes:
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError(f"expected H'xW'xD features, got shape {features.shape}")
    payload = np.ascontiguousarray(features, dtype="<f4").tobytes()
    h, w, d = features.shape
    return FEATURE_HEADER.pack(h, w, d, zlib.crc32(payload)) + payload


def decode_feature_map(data: bytes) -> np.ndarray:
    if len(data) < FEATURE_HEADER.size:
        raise ChecksumError("truncated feature header")
    h, w, d, crc = FEATURE_HEADER.unpack_from(data)
    payload = data[FEATURE_HEADER.size:]
    if len(payload) != 4 * h * w * d or zlib.crc32(payload) != crc:
        raise ChecksumError("feature map checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float32)


def write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def resize_nearest(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize using pixel-centre sampling; keeps dtype (and binarity)."""
    grid = np.asarray(grid)
    h, w = size
    in_h, in_w = grid.shape[:2]
    if (in_h, in_w) == (h, w):
        return grid.copy()
    rows = np.minimum(((np.arange(h) + 0.5) * in_h / h).astype(np.int64), in_h - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * in_w / w).astype(np.int64), in_w - 1)
    return grid[rows][:, cols]


def resize_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxW or HxWxC float grid (half-pixel centres, edge clamped)."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = size
    in_h, in_w = grid.shape[:2]
    if (in_h, in_w) == (h, w):
        return grid.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, in_h)
    c0, c1, fc = axis(w, in_w)
    if grid.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr
