"""Gradient inspection: run a method over the holdout split, write
gradient-difference maps and a JSON metrics report."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .baselines import BASELINES
from .checkpoint import load_checkpoint
from .imageio import round_half_away, write_png
from .model import Enhancer
from .objectives import NO_STRUCTURE, SsimConfig, dssim, gradient_info_value, gradient_magnitude, log_rmse, ssim
from .synth import DataError, DatasetManifest, ImageCache, flicker_sequences
from .tensor import Tensor

GRADIENT_MAP_RANGE = 30.0
REPORT_DIGITS = 12
SEQUENCE_MODES = ("condition", "flicker")

# 7-anchor jet palette, evenly spaced over [-range, +range]
JET_ANCHORS = np.array(
    [
        (0, 0, 255),
        (0, 128, 255),
        (0, 255, 255),
        (0, 255, 0),
        (255, 255, 0),
        (255, 128, 0),
        (255, 0, 0),
    ],
    dtype=np.float64,
)


def jet(d: np.ndarray, limit: float = GRADIENT_MAP_RANGE) -> np.ndarray:
    """Map values in [-limit, limit] (clamped) to uint8 RGB."""
    d = np.clip(np.asarray(d, dtype=np.float64), -limit, limit)
    stops = np.linspace(-limit, limit, len(JET_ANCHORS))
    rgb = np.stack([np.interp(d, stops, JET_ANCHORS[:, k]) for k in range(3)], axis=-1)
    return round_half_away(rgb).astype(np.uint8)


def gradient_diff_map(inp, out, limit: float = GRADIENT_MAP_RANGE) -> np.ndarray:
    """|grad out| - |grad in| on the 0..255 intensity scale, rendered with :func:`jet`."""
    a = np.asarray(getattr(inp, "pixels", inp), dtype=np.float64)
    b = np.asarray(getattr(out, "pixels", out), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"input and output shapes differ: {a.shape} vs {b.shape}")
    d = (gradient_magnitude(b) - gradient_magnitude(a)) * 255.0
    return jet(d, limit)


def gradient_gain(g_in: float, g_out: float) -> float | None:
    """G_out / G_in, with 0/0 taken as 1.  A flat input with a textured
    output has no finite gain and is reported as ``None``."""
    if g_in == 0.0:
        return 1.0 if g_out == 0.0 else None
    return g_out / g_in


def _r(v):
    if v is None:
        return None
    return float(f"{float(v):.{REPORT_DIGITS}g}")


# -- methods -----------------------------------------------------------------


class Method:
    """A callable ``(image, state) -> (output, state)`` plus identification."""

    def __init__(self, name: str, kind: str, fn, digest: str, recurrent: bool = False):
        self.name, self.kind, self.fn, self.digest, self.recurrent = name, kind, fn, digest, recurrent

    def start(self):
        return None

    def __call__(self, img, state):
        return self.fn(img, state)


class ModelMethod(Method):
    def __init__(self, name: str, model: Enhancer):
        super().__init__(name, "model", model.enhance, model.config_digest() + ":" + model.digest(), model.recurrent)
        self.model = model

    def start(self):
        return self.model.zero_state(1) if self.recurrent else None


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def resolve_method(method) -> Method:
    """``"identity"``, a baseline id, an :class:`Enhancer`, or a checkpoint path."""
    if isinstance(method, Method):
        return method
    if isinstance(method, Enhancer):
        return ModelMethod("model", method)
    name = str(method)
    if name == "identity":
        return Method(name, "identity", lambda x, s: (x.copy(), s), _digest({"method": name}))
    if name in BASELINES:
        fn = BASELINES[name]
        return Method(name, "baseline", lambda x, s: (fn(x), s), _digest({"method": name}))
    if Path(name).is_file():
        return ModelMethod(Path(name).name, load_checkpoint(name))
    raise ValueError(f"unknown method {name!r}; choose identity, {', '.join(sorted(BASELINES))} or a checkpoint path")


# -- evaluation --------------------------------------------------------------


def _sequences(manifest: DatasetManifest, mode: str, conditions, seed: int) -> list[list[dict]]:
    if mode == "flicker":
        seqs = flicker_sequences(manifest, "holdout", seed)
    elif mode == "condition":
        groups: dict[tuple[int, int], list[dict]] = {}
        for r in manifest.split("holdout"):
            groups.setdefault((r["scene_id"], r["condition_id"]), []).append(r)
        seqs = [sorted(g, key=lambda r: r["frame_idx"]) for _, g in sorted(groups.items())]
    else:
        raise ValueError(f"sequence mode must be one of {SEQUENCE_MODES}, got {mode!r}")
    if conditions is not None:
        keep = set(conditions)
        seqs = [[r for r in s if r["condition_id"] in keep] for s in seqs]
        seqs = [s for s in seqs if s]
    if not seqs:
        raise DataError("manifest has no holdout images to evaluate")
    return seqs


def _stats(values, gain=False) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"count": 0, "mean": None, "median": None}
    arr = np.array(vals, dtype=np.float64)
    out = {"count": len(vals), "mean": _r(arr.mean()), "median": _r(np.median(arr))}
    if gain:
        out["fraction_above_1"] = _r(np.mean(arr > 1.0))
    return out


AGGREGATED = (
    "gradient_gain",
    "log_rmse_to_reference",
    "log_rmse_input_to_reference",
    "ssim_to_reference",
    "ssim_input_to_reference",
    "consecutive_dssim",
    "consecutive_dssim_input",
)


def aggregate(records: list[dict]) -> dict:
    """Summary statistics; recomputing them from stored records reproduces the stored values."""
    return {k: _stats([r.get(k) for r in records], gain=k == "gradient_gain") for k in AGGREGATED}


def _ssim_value(a: np.ndarray, b: np.ndarray, cfg: SsimConfig) -> float:
    return ssim(Tensor(a), Tensor(b), cfg).item()


def evaluate(
    method,
    manifest: DatasetManifest,
    report_path=None,
    maps_dir=None,
    sequence: str = "condition",
    conditions=None,
    seed: int = 0,
    references: bool = True,
) -> dict:
    """Process every holdout image and build the metrics report.

    Sequences are either one per (scene, condition) in frame order, or the
    flicker sequences whose condition hops between neighbours each frame.
    Recurrent models start each sequence from a fresh state.
    """
    m = resolve_method(method)
    seqs = _sequences(manifest, sequence, conditions, seed)
    load = ImageCache(manifest)
    if maps_dir is not None:
        Path(maps_dir).mkdir(parents=True, exist_ok=True)

    records = []
    for seq in seqs:
        state = m.start()
        prev_in = prev_out = None
        for rec in seq:
            x = load(rec)
            y, state = m(x, state)
            y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
            g_in, g_out = gradient_info_value(x), gradient_info_value(y)
            row = {
                "path": rec["path"],
                "scene_id": rec["scene_id"],
                "frame_idx": rec["frame_idx"],
                "condition_id": rec["condition_id"],
                "G_input": _r(g_in),
                "G_output": _r(g_out),
                "gradient_gain": _r(gradient_gain(g_in, g_out)),
                "consecutive_dssim": None,
                "consecutive_dssim_input": None,
            }
            if references:
                try:
                    ref_rec = manifest.reference(rec["scene_id"], rec["frame_idx"])
                except DataError as e:
                    raise DataError(f"missing reference for {rec['path']}: {e}") from None
                ref = load(ref_rec)
                row["log_rmse_to_reference"] = _r(log_rmse(Tensor(y), Tensor(ref)).item())
                row["log_rmse_input_to_reference"] = _r(log_rmse(Tensor(x), Tensor(ref)).item())
                row["ssim_to_reference"] = _r(_ssim_value(y, ref, SsimConfig()))
                row["ssim_input_to_reference"] = _r(_ssim_value(x, ref, SsimConfig()))
            if prev_out is not None:
                row["consecutive_dssim"] = _r(dssim(Tensor(prev_out), Tensor(y), NO_STRUCTURE).item())
                row["consecutive_dssim_input"] = _r(dssim(Tensor(prev_in), Tensor(x), NO_STRUCTURE).item())
            if maps_dir is not None:
                write_png(Path(maps_dir) / f"{Path(rec['path']).stem}.graddiff.png", gradient_diff_map(x, y))
            records.append(row)
            prev_in, prev_out = x, y

    report = {
        "metadata": {
            "method": m.name,
            "method_kind": m.kind,
            "config_digest": m.digest,
            "seed": int(seed),
            "manifest_seed": int(manifest.seed),
            "sequence_mode": sequence,
            "conditions": None if conditions is None else sorted(int(c) for c in conditions),
            "gradient_map_range": GRADIENT_MAP_RANGE,
            "n_images": len(records),
        },
        "records": records,
        "aggregates": aggregate(records),
    }
    if report_path is not None:
        write_report(report, report_path)
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path) -> None:
    Path(path).write_text(dumps_report(report))


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
