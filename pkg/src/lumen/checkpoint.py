"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"VOEN" | u32 version=1 | u8 stage | u64 seed | u32 count
    count x ( u16 name_len | name (utf-8) | u8 precision (4 or 8) | u8 rank
              | rank x u32 dims | raw little-endian scalars )

Stage codes follow :data:`lumen.model.STAGES` (0=init .. 3=temporal). The
architecture is recovered from tensor names and shapes. Entries under the
``meta.`` prefix carry training metadata and are not model tensors.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import STAGES, Enhancer

MAGIC = b"VOEN"
VERSION = 1
_PRECISION = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode(tensors: "OrderedDict[str, np.ndarray]", stage: str, seed: int) -> bytes:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    parts = [MAGIC, struct.pack("<IBQI", VERSION, STAGES.index(stage), seed & (2**64 - 1), len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = arr.dtype.itemsize
        if code not in _PRECISION or arr.dtype.kind != "f":
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_PRECISION[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.off + n
        if end > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint reading {what} at offset {self.off}: "
                f"expected {end} bytes, file has {len(self.buf)}"
            )
        out = self.buf[self.off : end]
        self.off = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple["OrderedDict[str, np.ndarray]", str, int]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    stage_code, seed, count = r.unpack("<BQI", "header")
    if stage_code >= len(STAGES):
        raise CheckpointError(f"unknown stage code {stage_code} at offset 8")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        code, rank = r.unpack("<BB", f"{name} header")
        if code not in _PRECISION:
            raise CheckpointError(f"{name}: bad precision code {code} at offset {r.off - 2}")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        dt = _PRECISION[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(r.take(nbytes, f"{name} data"), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="))
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes after offset {r.off}")
    return tensors, STAGES[stage_code], seed


def save_checkpoint(model: Enhancer, path, meta: dict | None = None) -> None:
    tensors = OrderedDict(model.state_dict())
    for key, value in (meta or {}).items():
        tensors[f"meta.{key}"] = np.atleast_1d(np.asarray(value, dtype=np.float64))
    Path(path).write_bytes(encode(tensors, model.stage, model.seed))


def read_checkpoint(path) -> tuple[Enhancer, dict]:
    """Load a model and the ``meta.*`` entries stored with it."""
    tensors, stage, seed = decode(Path(path).read_bytes())
    meta = {k[5:]: v for k, v in tensors.items() if k.startswith("meta.")}
    state = OrderedDict((k, v) for k, v in tensors.items() if not k.startswith("meta."))
    try:
        widths = tuple(int(state[f"enc{k}.conv.weight"].shape[0]) for k in range(3))
        dtype = state["enc0.conv.weight"].dtype
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc.args[0]}") from None
    recurrent = "lstm0.w_x" in state
    model = Enhancer(widths, recurrent=recurrent, seed=seed, dtype=dtype)
    model.load_state_dict(state)
    model.stage = stage
    return model, meta


def load_checkpoint(path) -> Enhancer:
    return read_checkpoint(path)[0]
