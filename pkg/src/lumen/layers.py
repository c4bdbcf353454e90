"""Differentiable network layers built on :mod:`lumen.tensor`.

Feature maps are ``[N, C, H, W]``. Convolutions use either ``valid`` padding
or ``same-replicate`` padding (edge pixels repeated, odd kernels only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PADDINGS = ("valid", "same-replicate")


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- convolution -------------------------------------------------------------


@dataclass
class Conv2dParams:
    weight: Tensor  # [out_ch, in_ch, kH, kW]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: str = "same-replicate"

    def __post_init__(self):
        if self.padding not in PADDINGS:
            raise ValueError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        o, _, kh, kw = self.weight.shape
        if self.bias.shape != (o,):
            raise ValueError(f"bias shape {self.bias.shape} does not match {o} output channels")
        if self.padding == "same-replicate" and (kh % 2 == 0 or kw % 2 == 0):
            raise ValueError(f"same-replicate padding needs odd kernels, got {kh}x{kw}")

    @classmethod
    def init(cls, rng, in_ch, out_ch, kernel, padding="same-replicate", dtype=np.float32):
        fan_in, fan_out = in_ch * kernel * kernel, out_ch * kernel * kernel
        w = glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out, dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch, dtype), requires_grad=True), 1, padding)


def _pad_replicate(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="edge")


def _unpad_replicate(g: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Adjoint of :func:`_pad_replicate`: fold border gradients onto the edges."""
    if ph:
        inner = g[:, :, ph:-ph].copy()
        inner[:, :, 0] += g[:, :, :ph].sum(axis=2)
        inner[:, :, -1] += g[:, :, -ph:].sum(axis=2)
        g = inner
    if pw:
        inner = g[:, :, :, pw:-pw].copy()
        inner[:, :, :, 0] += g[:, :, :, :pw].sum(axis=3)
        inner[:, :, :, -1] += g[:, :, :, -pw:].sum(axis=3)
        g = inner
    return g


def conv2d(x: Tensor, params: Conv2dParams) -> Tensor:
    w, b = params.weight, params.bias
    T._check_dtypes(x, w, b)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects [N,C,H,W], got shape {x.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    s = params.stride
    if params.padding == "same-replicate":
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = 0
        if h < kh or wd < kw:
            raise ValueError(f"conv2d: input {h}x{wd} smaller than kernel {kh}x{kw} under valid padding")
    xp = _pad_replicate(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]  # [N,C,Ho,Wo,kh,kw]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)  # im2col
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gx = None
        if x.requires_grad and s == 1:
            # full correlation of the output gradient with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))  # [N,O,Hp,Wp,kh,kw]
            hp, wp = gwin.shape[2], gwin.shape[3]
            gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(n * hp * wp, o * kh * kw)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * kh * kw)
            dxp = (gcols @ wflip.T).reshape(n, hp, wp, c).transpose(0, 3, 1, 2)
            gx = _unpad_replicate(dxp, ph, pw)
        elif x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = _unpad_replicate(dxp, ph, pw)
        return gx, gw, gb

    return make_node(np.ascontiguousarray(out), (x, w, b), bw)


# -- pooling / upsampling ----------------------------------------------------


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(out, (x,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw)


# -- batch normalization -----------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def init(cls, ch, dtype=np.float32):
        return cls(
            Tensor(np.ones(ch, dtype), requires_grad=True),
            Tensor(np.zeros(ch, dtype), requires_grad=True),
            np.zeros(ch, dtype),
            np.ones(ch, dtype),
        )


def batch_norm(x: Tensor, params: BatchNormParams, train: bool) -> Tensor:
    """Per-channel normalization of ``[N,C,H,W]``.

    In train mode the batch mean and population variance are used and the
    running statistics are updated in place; in infer mode the running
    statistics are used and no update happens.
    """
    gamma, beta = params.gamma, params.beta
    T._check_dtypes(x, gamma, beta)
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ValueError(f"batch_norm: {c} channels but gamma has shape {gamma.shape}")
    dt = x.dtype.type
    g4 = gamma.data[None, :, None, None]
    if not train:
        inv = 1.0 / np.sqrt(params.running_var.astype(x.dtype) + dt(params.eps))
        xhat = (x.data - params.running_mean.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
        out = g4 * xhat + beta.data[None, :, None, None]

        def bw_infer(g):
            return g * g4 * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_node(out, (x, gamma, beta), bw_infer)

    m = n * h * w
    if m < 2:
        raise ValueError("batch_norm in train mode needs at least 2 elements per channel")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + dt(params.eps))
    xhat = xc * inv[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]

    mom = params.momentum
    params.running_mean[...] = (1 - mom) * params.running_mean + mom * mu
    params.running_var[...] = (1 - mom) * params.running_var + mom * var * (m / (m - 1))

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            gx = (inv[None, :, None, None] / m) * (
                m * dxhat - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        return gx, gg, gbeta

    return make_node(out, (x, gamma, beta), bw)


# -- LSTM --------------------------------------------------------------------

GATES = ("i", "f", "g", "o")


@dataclass
class LstmParams:
    """One LSTM layer. Gate blocks are stacked along the first axis in
    ``GATES`` order: rows ``[k*H:(k+1)*H]`` of ``w_x``/``w_h``/``bias`` belong
    to gate ``GATES[k]``."""

    w_x: Tensor  # [4H, D]
    w_h: Tensor  # [4H, H]
    bias: Tensor  # [4H]

    def __post_init__(self):
        h4, _ = self.w_x.shape
        if h4 % 4 or self.w_h.shape != (h4, h4 // 4) or self.bias.shape != (h4,):
            raise ValueError(
                f"inconsistent LSTM shapes: w_x {self.w_x.shape}, w_h {self.w_h.shape}, bias {self.bias.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w_h.shape[1]

    @classmethod
    def init(cls, rng, input_size, hidden_size, dtype=np.float32):
        h = hidden_size
        w_x = np.concatenate([glorot_uniform(rng, (h, input_size), input_size, h, dtype) for _ in GATES])
        w_h = np.concatenate([glorot_uniform(rng, (h, h), h, h, dtype) for _ in GATES])
        return cls(
            Tensor(w_x, requires_grad=True),
            Tensor(w_h, requires_grad=True),
            Tensor(np.zeros(4 * h, dtype), requires_grad=True),
        )


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch, hidden, dtype=np.float32):
        return cls(Tensor(np.zeros((batch, hidden), dtype)), Tensor(np.zeros((batch, hidden), dtype)))


def lstm_step(x: Tensor, params: LstmParams, state: LstmState | None = None) -> tuple[Tensor, LstmState]:
    """One time step. ``x`` is ``[D]`` or ``[N, D]``; returns ``(h', state')``.

    i, f, o = sigmoid(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c').
    """
    single = x.data.ndim == 1
    if single:
        x = T.reshape(x, (1, x.shape[0]))
    if x.data.ndim != 2 or x.shape[1] != params.input_size:
        raise ValueError(f"lstm_step: input shape {x.shape} does not match input size {params.input_size}")
    n, hid = x.shape[0], params.hidden_size
    if state is None:
        state = LstmState.zeros(n, hid, x.dtype)
    if state.h.shape != (n, hid) or state.c.shape != (n, hid):
        raise ValueError(f"lstm_step: state shapes {state.h.shape}/{state.c.shape}, expected {(n, hid)}")

    z = T.matmul(x, T.transpose(params.w_x)) + T.matmul(state.h, T.transpose(params.w_h))
    z = z + T.broadcast_to(T.reshape(params.bias, (1, 4 * hid)), (n, 4 * hid))
    i = T.sigmoid(z[:, 0:hid])
    f = T.sigmoid(z[:, hid : 2 * hid])
    g = T.tanh(z[:, 2 * hid : 3 * hid])
    o = T.sigmoid(z[:, 3 * hid :])
    c_new = f * state.c + i * g
    h_new = o * T.tanh(c_new)
    new_state = LstmState(h_new, c_new)
    if single:
        return T.reshape(h_new, (hid,)), new_state
    return h_new, new_state
