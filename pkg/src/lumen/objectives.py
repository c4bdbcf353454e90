"""Training and evaluation objectives on intensity images in [0, 1].

All functions accept an ``ImageFrame``, a numpy array, or a :class:`Tensor`
and return a scalar :class:`Tensor` so they can sit at the end of a graph.
Arrays of rank 4 (``[N, 1, H, W]``) are treated as batches; the result is the
mean of the per-image values.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .layers import Conv2dParams, conv2d
from .tensor import LOG_EPS, Tensor, make_node


def _to_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    pixels = getattr(x, "pixels", x)
    return Tensor(np.asarray(pixels, dtype=dtype if dtype is not None else np.float64))


def _as_batch(t: Tensor) -> Tensor:
    """View any image-like tensor as ``[N, 1, H, W]``."""
    nd = t.data.ndim
    if nd == 2:
        return T.reshape(t, (1, 1) + t.shape)
    if nd == 3:
        return T.reshape(t, (t.shape[0], 1) + t.shape[1:])
    if nd == 4:
        return t
    raise ValueError(f"expected an image of rank 2-4, got shape {t.shape}")


# -- gradient information ----------------------------------------------------


def central_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences along x (last axis) and y with replicate borders."""
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) * 0.5
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) * 0.5
    return gx, gy


def _central_adjoint(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Transpose of :func:`central_gradients` applied to ``(gx, gy)``."""
    shape = gx.shape
    out = np.zeros(shape, dtype=gx.dtype)
    # x direction: d[j] = (y[min(j+1, W-1)] - y[max(j-1, 0)]) / 2
    w = shape[-1]
    right = np.minimum(np.arange(w) + 1, w - 1)
    left = np.maximum(np.arange(w) - 1, 0)
    hx = 0.5 * gx
    for j in range(w):
        out[..., right[j]] += hx[..., j]
        out[..., left[j]] -= hx[..., j]
    h = shape[-2]
    down = np.minimum(np.arange(h) + 1, h - 1)
    up = np.maximum(np.arange(h) - 1, 0)
    hy = 0.5 * gy
    for i in range(h):
        out[..., down[i], :] += hy[..., i, :]
        out[..., up[i], :] -= hy[..., i, :]
    return out


def gradient_info(y) -> Tensor:
    """Sum over all pixels of the squared central-difference gradient magnitude."""
    t = _to_tensor(y)
    if t.data.ndim < 2 or t.shape[-1] < 2 or t.shape[-2] < 2:
        raise ValueError(f"gradient_info needs an image of at least 2x2, got shape {t.shape}")
    gx, gy = central_gradients(t.data)
    value = np.asarray((gx * gx).sum() + (gy * gy).sum())
    return make_node(value, (t,), lambda g: (2.0 * g * _central_adjoint(gx, gy),))


def gradient_info_value(img: np.ndarray) -> float:
    gx, gy = central_gradients(np.asarray(img, dtype=np.float64))
    return float((gx * gx).sum() + (gy * gy).sum())


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    gx, gy = central_gradients(np.asarray(img, dtype=np.float64))
    return np.sqrt(gx * gx + gy * gy)


# -- logarithmic RMSE --------------------------------------------------------


def log_rmse(y, y_ref, eps: float = LOG_EPS) -> Tensor:
    """sqrt(mean((ln(y + eps) - ln(y_ref + eps))^2)), averaged over a batch."""
    a = _to_tensor(y)
    b = _to_tensor(y_ref, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"log_rmse: shape mismatch {a.shape} vs {b.shape}")
    d = T.log_offset(a, eps) - T.log_offset(b, eps)
    sq = d * d
    if a.data.ndim == 4:
        per_image = T.sqrt(T.mean(sq, axis=(1, 2, 3)))
        return T.mean(per_image)
    return T.sqrt(T.mean(sq))


# -- SSIM --------------------------------------------------------------------


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    include_structure: bool = True

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and positive, got {self.window}")
        if min(self.sigma, self.dynamic_range, self.k1, self.k2) <= 0:
            raise ValueError("SSIM constants must be strictly positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2


NO_STRUCTURE = SsimConfig(include_structure=False)


@lru_cache(maxsize=8)
def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_filter(x: Tensor, cfg: SsimConfig) -> Tensor:
    w = gaussian_window(cfg.window, cfg.sigma).astype(x.dtype)[None, None]
    params = Conv2dParams(Tensor(w), Tensor(np.zeros(1, x.dtype)), padding="valid")
    return conv2d(x, params)


def ssim(y1, y2, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """Mean SSIM over all window positions (valid windows only).

    With ``include_structure`` the product of contrast and structure factors
    reduces to ``(2 cov + C2) / (var1 + var2 + C2)`` because ``C3 = C2 / 2``.
    Without it, the contrast factor uses ``sqrt(var1) * sqrt(var2)``.
    """
    a = _as_batch(_to_tensor(y1))
    b = _as_batch(_to_tensor(y2, dtype=a.dtype))
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.shape[2] < cfg.window or a.shape[3] < cfg.window:
        raise ValueError(f"ssim: image {a.shape[2]}x{a.shape[3]} smaller than window {cfg.window}")
    c1, c2 = cfg.c1, cfg.c2
    mu1 = _window_filter(a, cfg)
    mu2 = _window_filter(b, cfg)
    mu11, mu22, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    var1 = T.clamp(_window_filter(a * a, cfg) - mu11, lo=0.0)
    var2 = T.clamp(_window_filter(b * b, cfg) - mu22, lo=0.0)
    lum = T.div(T.add_scalar(T.scale(mu12, 2.0), c1), T.add_scalar(mu11 + mu22, c1))
    if cfg.include_structure:
        cov = _window_filter(a * b, cfg) - mu12
        cs = T.div(T.add_scalar(T.scale(cov, 2.0), c2), T.add_scalar(var1 + var2, c2))
    else:
        sd12 = T.sqrt(var1) * T.sqrt(var2)
        cs = T.div(T.add_scalar(T.scale(sd12, 2.0), c2), T.add_scalar(var1 + var2, c2))
    return T.mean(lum * cs)


def dssim(y1, y2, cfg: SsimConfig = SsimConfig()) -> Tensor:
    """(1 - SSIM) / 2, the minimized form of the similarity term."""
    s = ssim(y1, y2, cfg)
    return T.scale(T.add_scalar(T.scale(s, -1.0), 1.0), 0.5)
