"""Adam and the three training stages: pretrain, siamese, temporal."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import read_checkpoint, save_checkpoint
from .model import DEFAULT_WIDTHS, Enhancer
from .objectives import NO_STRUCTURE, SsimConfig, dssim, log_rmse
from .synth import (
    DatasetManifest,
    ImageCache,
    load_manifest,
    pair_samples,
    temporal_samples,
    triplet_samples,
)
from .tensor import Tensor

LEARNING_RATE = 1e-4
DEFAULT_EPOCHS = {"pretrain": 20, "siamese": 10, "temporal": 10}
DEFAULT_SAMPLES = {"pretrain": 200, "siamese": 100, "temporal": 100}
FULL_SCALE_SAMPLES = {"pretrain": 80_000, "siamese": 40_000, "temporal": 40_000}
REQUIRED_STAGE = {"pretrain": ("init", "pretrain"), "siamese": ("pretrain", "siamese"), "temporal": ("siamese", "temporal")}


class StageOrderError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class ArchitectureError(ValueError):
    pass


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        dt = p.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p.data -= dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        k = max_norm / total
        for g in grads.values():
            g *= g.dtype.type(k)
    return total


# -- configuration -----------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int | None = None
    batch_size: int = 8
    learning_rate: float = LEARNING_RATE
    lambda_log: float = 1.0
    lambda_ssim: float = 0.5
    seed: int = 0
    manifest: str | None = None
    init_checkpoint: str | None = None
    out_checkpoint: str | None = None
    log_path: str | None = None
    max_samples: int | None = None
    holdout_samples: int = 20
    max_iterations: int | None = None
    grad_clip: float = 5.0
    widths: tuple = DEFAULT_WIDTHS

    def __post_init__(self):
        if self.stage not in DEFAULT_EPOCHS:
            raise ValueError(f"stage must be one of {tuple(DEFAULT_EPOCHS)}, got {self.stage!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.max_samples is None:
            self.max_samples = DEFAULT_SAMPLES[self.stage]
        self.widths = tuple(self.widths)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lambda_log < 0 or self.lambda_ssim < 0 or (self.lambda_log == 0 and self.lambda_ssim == 0):
            raise ValueError("loss weights must be non-negative and not both zero")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config fields {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# -- samples -----------------------------------------------------------------


@dataclass
class Sample:
    arrays: tuple  # 2-D float arrays, order fixed by stage
    ids: tuple = ()  # manifest paths, for diagnostics


def _subset(items: list, n: int | None, rng: np.random.Generator) -> list:
    if n is None or n >= len(items):
        return list(items)
    idx = np.sort(rng.choice(len(items), size=n, replace=False))
    return [items[i] for i in idx]


def manifest_samples(manifest: DatasetManifest, stage: str, split: str, n: int | None, seed: int) -> list[Sample]:
    sampler = {"pretrain": pair_samples, "siamese": triplet_samples, "temporal": temporal_samples}[stage]
    records = sampler(manifest, split)
    if not records:
        raise ValueError(f"manifest provides no {stage} samples in split {split!r}")
    chosen = _subset(records, n, np.random.default_rng([seed, 7 if split == "train" else 11]))
    load = ImageCache(manifest)
    return [Sample(tuple(load(r) for r in recs), tuple(r["path"] for r in recs)) for recs in chosen]


def _batch(samples: Sequence[Sample], dtype) -> list[Tensor]:
    k = len(samples[0].arrays)
    return [Tensor(np.stack([s.arrays[j] for s in samples])[:, None].astype(dtype)) for j in range(k)]


# -- stage losses ------------------------------------------------------------


def pretrain_loss(model: Enhancer, batch, cfg: TrainConfig, train: bool) -> Tensor:
    x, ref = batch
    out, _ = model(x, train=train)
    return log_rmse(out, ref)


def siamese_outputs(model: Enhancer, y1: Tensor, y2: Tensor, train: bool):
    """Both branches run through the same parameter set."""
    o1, _ = model(y1, train=train)
    o2, _ = model(y2, train=train)
    return o1, o2


def siamese_loss(model: Enhancer, batch, cfg: TrainConfig, train: bool) -> Tensor:
    y1, y2, ref = batch
    o1, o2 = siamese_outputs(model, y1, y2, train)
    pix = log_rmse(o1, ref) + log_rmse(o2, ref)
    return T.scale(pix, cfg.lambda_log) + T.scale(dssim(o1, o2, SsimConfig()), cfg.lambda_ssim)


def temporal_loss(model: Enhancer, batch, cfg: TrainConfig, train: bool) -> Tensor:
    x0, x1, r0, r1 = batch
    o0, state = model(x0, model.zero_state(x0.shape[0]), train=train)
    o1, _ = model(x1, state, train=train)
    pix = log_rmse(o0, r0) + log_rmse(o1, r1)
    return T.scale(pix, cfg.lambda_log) + T.scale(dssim(o0, o1, NO_STRUCTURE), cfg.lambda_ssim)


STAGE_LOSS: dict[str, Callable] = {"pretrain": pretrain_loss, "siamese": siamese_loss, "temporal": temporal_loss}


# -- driver ------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Enhancer
    log: list[dict]
    iterations: int


def evaluate_loss(model: Enhancer, samples: Sequence[Sample], cfg: TrainConfig, batch_size: int | None = None) -> float:
    loss_fn = STAGE_LOSS[cfg.stage]
    bs = batch_size or cfg.batch_size
    total, count = 0.0, 0
    for i in range(0, len(samples), bs):
        chunk = samples[i : i + bs]
        total += loss_fn(model, _batch(chunk, model.dtype), cfg, False).item() * len(chunk)
        count += len(chunk)
    return total / count


def check_stage(model: Enhancer, stage: str) -> None:
    if model.stage not in REQUIRED_STAGE[stage]:
        need = " or ".join(REQUIRED_STAGE[stage])
        raise StageOrderError(f"stage {stage!r} needs a model tagged {need}, got {model.stage!r}")
    if stage == "temporal" and not model.recurrent:
        raise ArchitectureError("temporal stage needs a model with the recurrent bottleneck")


def fit(
    model: Enhancer,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    holdout: Sequence[Sample] = (),
    log_fn: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` passes of Adam over ``samples`` for ``cfg.stage``.

    A fresh Adam state is used for each call. Batches are drawn in a
    per-epoch permutation from the seeded generator.
    """
    check_stage(model, cfg.stage)
    if not samples:
        raise ValueError("no training samples")
    loss_fn = STAGE_LOSS[cfg.stage]
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    adam = AdamState(lr=cfg.learning_rate)
    log: list[dict] = []
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [samples[i] for i in order[start : start + cfg.batch_size]]
            loss = loss_fn(model, _batch(chunk, model.dtype), cfg, True)
            value = loss.item()
            if not math.isfinite(value):
                ids = [p for s in chunk for p in s.ids]
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, iteration {it + 1}; batch records: {ids}")
            loss.backward()
            grads = {n: p.grad for n, p in params.items()}
            for n, g in grads.items():
                if not np.all(np.isfinite(g)):
                    ids = [p for s in chunk for p in s.ids]
                    raise NumericError(f"non-finite gradient for {n} at iteration {it + 1}; batch records: {ids}")
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(params, grads, adam)
            losses.append(value)
            it += 1
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                break
        rec = {
            "stage": cfg.stage,
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "holdout_loss": evaluate_loss(model, holdout, cfg) if holdout else None,
            "wall_ms": int(round((time.perf_counter() - t0) * 1000)),
            "seed": cfg.seed,
        }
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if cfg.max_iterations is not None and it >= cfg.max_iterations:
            break
    model.stage = cfg.stage
    return TrainResult(model, log, it)


def _prepare_model(cfg: TrainConfig, model: Enhancer | None) -> Enhancer:
    if model is not None:
        return model
    if cfg.init_checkpoint:
        model = read_checkpoint(cfg.init_checkpoint)[0]
        if cfg.stage == "temporal" and not model.recurrent:
            model = model.with_recurrent(cfg.seed)
        return model
    if cfg.stage != "pretrain":
        raise StageOrderError(f"stage {cfg.stage!r} needs a checkpoint from the previous stage")
    return Enhancer(cfg.widths, recurrent=False, seed=cfg.seed)


def run_stage(cfg: TrainConfig, model: Enhancer | None = None, manifest: DatasetManifest | None = None) -> TrainResult:
    """Train one stage from a manifest; writes checkpoint and log when configured."""
    model = _prepare_model(cfg, model)
    check_stage(model, cfg.stage)
    if manifest is None:
        if not cfg.manifest:
            raise ValueError("no manifest given")
        manifest = load_manifest(cfg.manifest)
    train = manifest_samples(manifest, cfg.stage, "train", cfg.max_samples, cfg.seed)
    try:
        hold = manifest_samples(manifest, cfg.stage, "holdout", cfg.holdout_samples, cfg.seed)
    except ValueError:
        hold = []

    log_file = None
    if cfg.log_path:
        log_file = open(cfg.log_path, "w")

    def log_fn(rec):
        if log_file is not None:
            log_file.write(json.dumps(rec) + "\n")
            log_file.flush()

    try:
        result = fit(model, train, cfg, hold, log_fn)
    finally:
        if log_file is not None:
            log_file.close()
    if cfg.out_checkpoint:
        save_checkpoint(result.model, cfg.out_checkpoint, meta={"adam_reset": 1.0, "iterations": float(result.iterations)})
    return result


def train_pretrain(cfg: TrainConfig, model: Enhancer | None = None, manifest=None) -> TrainResult:
    return run_stage(_with_stage(cfg, "pretrain"), model, manifest)


def train_siamese(cfg: TrainConfig, model: Enhancer | None = None, manifest=None) -> TrainResult:
    return run_stage(_with_stage(cfg, "siamese"), model, manifest)


def train_temporal(cfg: TrainConfig, model: Enhancer | None = None, manifest=None) -> TrainResult:
    if model is not None and not model.recurrent:
        raise ArchitectureError("temporal stage needs a model with the recurrent bottleneck")
    return run_stage(_with_stage(cfg, "temporal"), model, manifest)


def _with_stage(cfg: TrainConfig, stage: str) -> TrainConfig:
    if cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage!r}, not {stage!r}")
    return cfg
