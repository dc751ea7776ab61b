"""File formats: UGD1 raw float maps, 8-bit PNG previews, small JSON/CSV helpers."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import ValidationError

UGD1_MAGIC = b"UGD1"
_UGD1_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved (0)


def write_ugd1(path, array):
    """Write an (H, W) map as little-endian float32, row-major, after a 16-byte header."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValidationError(f"UGD1 stores 2-D maps, got shape {a.shape}")
    H, W = a.shape
    data = _UGD1_HEADER.pack(UGD1_MAGIC, W, H, 0) + a.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(data)


def read_ugd1(path):
    raw = Path(path).read_bytes()
    if len(raw) < _UGD1_HEADER.size:
        raise ValidationError(f"{path}: truncated UGD1 header")
    magic, W, H, reserved = _UGD1_HEADER.unpack_from(raw)
    if magic != UGD1_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if reserved != 0:
        raise ValidationError(f"{path}: reserved field must be 0")
    body = raw[_UGD1_HEADER.size:]
    if len(body) != 4 * W * H:
        raise ValidationError(f"{path}: expected {4 * W * H} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(H, W).astype(np.float64)


def to_uint8(img, lo=None, hi=None):
    """Map an image to 8 bits; ``lo``/``hi`` default to 0/1 for RGB and min/max for maps."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2 and lo is None and hi is None:
        finite = a[np.isfinite(a)]
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    lo = 0.0 if lo is None else lo
    hi = 1.0 if hi is None else hi
    scale = (hi - lo) if hi > lo else 1.0
    a = np.nan_to_num((a - lo) / scale, nan=0.0)
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img, lo=None, hi=None):
    Image.fromarray(to_uint8(img, lo, hi)).save(path, format="PNG")


def read_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
