"""Small encoder-decoder enhancer with an optional recurrent bottleneck.

Layout for widths ``(16, 32, 64)``::

    input [N,1,H,W]
      -> 3 x (conv5x5 -> batchnorm -> relu -> maxpool2)      # H/8 x W/8 x 64
      -> [recurrent] spatial mean -> 2 LSTM layers -> broadcast add
      -> 3 x (upsample2 -> conv5x5 -> batchnorm -> relu)     # 64 -> 32 -> 16 -> 1
      -> concat(decoder, input) -> conv1x1 (2 -> 1) -> sigmoid
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (
    BatchNormParams,
    Conv2dParams,
    LstmParams,
    LstmState,
    batch_norm,
    conv2d,
    lstm_step,
    max_pool2,
    upsample_nearest2,
)
from .tensor import Tensor

DEFAULT_WIDTHS = (16, 32, 64)
KERNEL = 5

STAGES = ("init", "pretrain", "siamese", "temporal")


class ShapeError(ValueError):
    pass


@dataclass
class RecurrentState:
    """Per-sequence state of the two bottleneck LSTM layers."""

    layers: tuple[LstmState, LstmState]

    def detach(self) -> RecurrentState:
        return RecurrentState(tuple(LstmState(s.h.detach(), s.c.detach()) for s in self.layers))


class Enhancer:
    """Learnable parameters plus the forward pass.

    Parameters are stored as named leaf tensors; batch-norm running statistics
    live in :attr:`buffers`. Both are exported by :meth:`state_dict`.
    """

    def __init__(self, widths=DEFAULT_WIDTHS, recurrent: bool = False, seed: int = 0, dtype=np.float32):
        widths = tuple(int(w) for w in widths)
        if len(widths) != 3 or min(widths) < 1:
            raise ValueError(f"widths must be three positive ints, got {widths}")
        self.widths = widths
        self.recurrent = bool(recurrent)
        self.seed = int(seed)
        self.stage = "init"
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        chans_in = (1,) + widths[:-1]
        self.encoder = [
            (Conv2dParams.init(rng, ci, co, KERNEL, dtype=dtype), BatchNormParams.init(co, dtype))
            for ci, co in zip(chans_in, widths)
        ]
        dec_out = widths[::-1][1:] + (1,)
        self.decoder = [
            (Conv2dParams.init(rng, ci, co, KERNEL, dtype=dtype), BatchNormParams.init(co, dtype))
            for ci, co in zip(widths[::-1], dec_out)
        ]
        self.merge = Conv2dParams.init(rng, 2, 1, 1, dtype=dtype)
        self.lstm: list[LstmParams] = []
        if self.recurrent:
            self.lstm = self._init_lstm(seed)

    def _init_lstm(self, seed):
        # separate stream so adding the recurrent block leaves the CNN weights untouched
        rng = np.random.default_rng([seed, 1])
        b = self.widths[-1]
        return [LstmParams.init(rng, b, b, self.dtype), LstmParams.init(rng, b, b, self.dtype)]

    # -- parameter access --------------------------------------------------

    def parameters(self) -> OrderedDict[str, Tensor]:
        p: OrderedDict[str, Tensor] = OrderedDict()
        for prefix, blocks in (("enc", self.encoder), ("dec", self.decoder)):
            for k, (conv, bn) in enumerate(blocks):
                p[f"{prefix}{k}.conv.weight"] = conv.weight
                p[f"{prefix}{k}.conv.bias"] = conv.bias
                p[f"{prefix}{k}.bn.gamma"] = bn.gamma
                p[f"{prefix}{k}.bn.beta"] = bn.beta
        p["merge.weight"] = self.merge.weight
        p["merge.bias"] = self.merge.bias
        for k, layer in enumerate(self.lstm):
            p[f"lstm{k}.w_x"] = layer.w_x
            p[f"lstm{k}.w_h"] = layer.w_h
            p[f"lstm{k}.bias"] = layer.bias
        return p

    def buffers(self) -> OrderedDict[str, np.ndarray]:
        b: OrderedDict[str, np.ndarray] = OrderedDict()
        for prefix, blocks in (("enc", self.encoder), ("dec", self.decoder)):
            for k, (_, bn) in enumerate(blocks):
                b[f"{prefix}{k}.bn.running_mean"] = bn.running_mean
                b[f"{prefix}{k}.bn.running_var"] = bn.running_var
        return b

    def state_dict(self) -> OrderedDict[str, np.ndarray]:
        out = OrderedDict((k, v.data) for k, v in self.parameters().items())
        out.update(self.buffers())
        return out

    def load_state_dict(self, state: dict) -> None:
        own = {**{k: v.data for k, v in self.parameters().items()}, **self.buffers()}
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src.astype(arr.dtype)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_dict().items():
            h.update(name.encode())
            h.update(str(arr.dtype).encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def config(self) -> dict:
        return {"widths": list(self.widths), "recurrent": self.recurrent}

    def config_digest(self) -> str:
        return hashlib.sha256(repr(sorted(self.config().items())).encode()).hexdigest()[:16]

    def astype(self, dtype) -> Enhancer:
        """Copy of the model at another precision (used by gradient checks)."""
        other = Enhancer(self.widths, self.recurrent, self.seed, dtype)
        other.load_state_dict(self.state_dict())
        other.stage = self.stage
        return other

    def copy(self) -> Enhancer:
        return self.astype(self.dtype)

    def with_recurrent(self, seed: int | None = None) -> Enhancer:
        """Copy that adds the recurrent bottleneck (fresh LSTM weights)."""
        if self.recurrent:
            return self.copy()
        other = Enhancer(self.widths, True, self.seed, self.dtype)
        if seed is not None:
            other.lstm = other._init_lstm(seed)
        for name, arr in self.state_dict().items():
            target = other.parameters().get(name)
            (target.data if target is not None else other.buffers()[name])[...] = arr
        other.stage = self.stage
        return other

    # -- forward -----------------------------------------------------------

    def check_input(self, shape) -> None:
        if len(shape) != 4 or shape[1] != 1:
            raise ShapeError(f"expected input [N,1,H,W], got {tuple(shape)}")
        h, w = shape[2], shape[3]
        if h % 8 or w % 8 or h == 0 or w == 0:
            raise ShapeError(f"input dimensions must be divisible by 8, got {h}x{w}")

    def bottleneck_shape(self, height: int, width: int) -> tuple[int, int, int]:
        self.check_input((1, 1, height, width))
        return (self.widths[-1], height // 8, width // 8)

    def zero_state(self, batch: int) -> RecurrentState:
        b = self.widths[-1]
        return RecurrentState(tuple(LstmState.zeros(batch, b, self.dtype) for _ in range(2)))

    def forward(self, x: Tensor, state: RecurrentState | None = None, train: bool = False):
        """Run the network on ``x`` of shape ``[N,1,H,W]``.

        Returns ``(output, state')``; ``state'`` is None for non-recurrent models.
        """
        self.check_input(x.shape)
        if x.dtype != self.dtype:
            raise TypeError(f"model is {self.dtype}, input is {x.dtype}")
        h = x
        for conv, bn in self.encoder:
            h = max_pool2(T.relu(batch_norm(conv2d(h, conv), bn, train)))

        new_state = None
        if self.recurrent:
            n, c, bh, bw = h.shape
            if state is None:
                state = self.zero_state(n)
            for s in state.layers:
                if s.h.shape != (n, c):
                    raise ShapeError(f"recurrent state shape {s.h.shape} does not match batch/bottleneck {(n, c)}")
            v = T.mean(h, axis=(2, 3))
            v, s0 = lstm_step(v, self.lstm[0], state.layers[0])
            v, s1 = lstm_step(v, self.lstm[1], state.layers[1])
            h = h + T.broadcast_to(T.reshape(v, (n, c, 1, 1)), h.shape)
            new_state = RecurrentState((s0, s1))
        elif state is not None:
            raise ShapeError("non-recurrent model does not take a state")

        for conv, bn in self.decoder:
            h = T.relu(batch_norm(conv2d(upsample_nearest2(h), conv), bn, train))
        out = T.sigmoid(conv2d(T.concat([h, x], axis=1), self.merge))
        return out, new_state

    def __call__(self, x, state=None, train=False):
        return self.forward(x, state, train)

    def enhance(self, frame, state: RecurrentState | None = None):
        """Enhance one image (``ImageFrame`` or 2-D array) in inference mode.

        Returns ``(output, state')`` with the output of the same type as the input.
        """
        pixels = np.asarray(getattr(frame, "pixels", frame), dtype=np.float64)
        if pixels.ndim != 2:
            raise ShapeError(f"expected a 2-D image, got shape {pixels.shape}")
        if pixels.size and (pixels.min() < 0 or pixels.max() > 1):
            raise ValueError("input intensities must lie in [0, 1]")
        x = Tensor(pixels[None, None].astype(self.dtype))
        out, new_state = self.forward(x, state, train=False)
        result = out.data[0, 0].astype(np.float64)
        if hasattr(frame, "with_pixels"):
            result = frame.with_pixels(result)
        return result, new_state

    def enhance_sequence(self, frames):
        """Enhance frames in order, carrying recurrent state from a fresh start."""
        state = self.zero_state(1) if self.recurrent else None
        outs = []
        for f in frames:
            o, state = self.enhance(f, state)
            outs.append(o)
        return outs
