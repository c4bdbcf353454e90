"""Classical enhancement baselines: min-max normalization, global histogram
equalization and contrast-limited adaptive histogram equalization.

All three accept either a bare 2-D array in [0, 1] or an :class:`ImageFrame`
and return the same kind of object.  Quantization always rounds half away
from zero (see :func:`lumen.imageio.round_half_away`).
"""

from __future__ import annotations

import numpy as np

from .imageio import round_half_away

LEVELS = 256
DEFAULT_TILES = (8, 8)
DEFAULT_CLIP = 2.0


def _unwrap(frame):
    pixels = getattr(frame, "pixels", frame)
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def _wrap(frame, out: np.ndarray):
    if hasattr(frame, "with_pixels"):
        return frame.with_pixels(out)
    return out


def normalize(frame):
    """Min-max stretch to [0, 1]; a constant image becomes 0.5 everywhere."""
    x = _unwrap(frame)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return _wrap(frame, np.full_like(x, 0.5))
    return _wrap(frame, (x - lo) / (hi - lo))


def quantize(x: np.ndarray, levels: int = LEVELS) -> np.ndarray:
    return round_half_away(np.clip(x, 0.0, 1.0) * (levels - 1)).astype(np.int64)


def equalization_lut(hist: np.ndarray) -> np.ndarray:
    """Map each bin v to round((cdf(v) - cdf_min) / (1 - cdf_min) * (L-1)) / (L-1).

    ``cdf_min`` is the cdf at the lowest occupied bin.  When every count
    sits in one bin the formula degenerates, and the identity mapping is
    returned instead.
    """
    hist = np.asarray(hist, dtype=np.float64)
    levels = hist.size
    total = hist.sum()
    cdf = np.cumsum(hist) / total
    cdf_min = cdf[np.flatnonzero(hist > 0)[0]]
    if cdf_min >= 1.0:
        return np.arange(levels, dtype=np.float64) / (levels - 1)
    scaled = np.maximum(cdf - cdf_min, 0.0) / (1.0 - cdf_min) * (levels - 1)
    return round_half_away(scaled) / (levels - 1)


def global_he(frame, levels: int = LEVELS):
    x = _unwrap(frame)
    if x.min() == x.max():
        return _wrap(frame, x.copy())
    q = quantize(x, levels)
    lut = equalization_lut(np.bincount(q.ravel(), minlength=levels))
    return _wrap(frame, lut[q])


def clip_histogram(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    """Cap every bin at ``clip_limit`` times the mean count and spread the
    excess evenly over all bins."""
    hist = np.asarray(hist, dtype=np.float64)
    limit = clip_limit * hist.sum() / hist.size
    excess = np.maximum(hist - limit, 0.0).sum()
    return np.minimum(hist, limit) + excess / hist.size


def tile_edges(n: int, tiles: int) -> np.ndarray:
    """Integer boundaries splitting ``n`` pixels into ``tiles`` near-equal runs."""
    return np.array([(i * n) // tiles for i in range(tiles + 1)])


def _axis_weights(n: int, edges: np.ndarray):
    """Neighbouring tile indices and lerp weight for every pixel along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi = np.clip(np.searchsorted(centers, pos, side="right"), 1, max(len(centers) - 1, 1))
    lo = hi - 1
    if len(centers) == 1:
        return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64), np.zeros(n)
    w = np.clip((pos - centers[lo]) / (centers[hi] - centers[lo]), 0.0, 1.0)
    return lo, hi, w


def adaptive_he(frame, tiles=DEFAULT_TILES, clip_limit: float = DEFAULT_CLIP, levels: int = LEVELS):
    """Contrast-limited adaptive equalization with bilinear blending of the
    per-tile mappings between tile centers."""
    x = _unwrap(frame)
    ty, tx = (int(t) for t in tiles)
    h, w = x.shape
    if ty < 1 or tx < 1:
        raise ValueError(f"tile grid must be positive, got {tiles}")
    if ty > h or tx > w:
        raise ValueError(f"tile grid {ty}x{tx} is larger than the {h}x{w} image")
    if clip_limit <= 0:
        raise ValueError("clip_limit must be positive")
    if x.min() == x.max():
        return _wrap(frame, x.copy())

    q = quantize(x, levels)
    ey, ex = tile_edges(h, ty), tile_edges(w, tx)
    luts = np.empty((ty, tx, levels))
    for i in range(ty):
        for j in range(tx):
            block = q[ey[i] : ey[i + 1], ex[j] : ex[j + 1]]
            hist = clip_histogram(np.bincount(block.ravel(), minlength=levels), clip_limit)
            luts[i, j] = equalization_lut(hist)

    y0, y1, wy = _axis_weights(h, ey)
    x0, x1, wx = _axis_weights(w, ex)
    Y0, Y1, WY = y0[:, None], y1[:, None], wy[:, None]
    X0, X1, WX = x0[None, :], x1[None, :], wx[None, :]
    v00, v01 = luts[Y0, X0, q], luts[Y0, X1, q]
    v10, v11 = luts[Y1, X0, q], luts[Y1, X1, q]
    top = v00 + WX * (v01 - v00)
    bottom = v10 + WX * (v11 - v10)
    return _wrap(frame, np.clip(top + WY * (bottom - top), 0.0, 1.0))


BASELINES = {"norm": normalize, "ghe": global_he, "ahe": adaptive_he}


def get_baseline(name: str):
    try:
        return BASELINES[name]
    except KeyError:
        raise ValueError(f"unknown baseline {name!r}; choose from {sorted(BASELINES)}") from None
