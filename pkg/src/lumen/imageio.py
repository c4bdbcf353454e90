"""8-bit PNG storage and the shared quantization rule."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
from PIL import Image


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return round_half_away(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize8(pixels: np.ndarray) -> np.ndarray:
    """Snap [0,1] intensities to the 8-bit grid they would be stored at."""
    return to_uint8(pixels).astype(np.float64) / 255.0


def encode_png(pixels: np.ndarray) -> bytes:
    arr = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(arr)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_png(path, pixels: np.ndarray) -> str:
    """Write a grayscale ([0,1] float or uint8) or RGB uint8 image; return its sha256."""
    data = encode_png(pixels)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_png(path) -> np.ndarray:
    """Read a PNG as float64 grayscale in [0,1]."""
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
