"""Procedural scenes, photometric conditions, reference selection and manifests.

A scene is a large textured canvas; each frame is a crop whose origin moves by
a small integer offset per frame, so consecutive frames differ by a pure
translation. Every frame is rendered under each condition of a gamma/contrast
grid, quantized to 8 bits and written as PNG. Per pose, the variant with the
most gradient information is flagged as the reference.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imageio import quantize8, read_png, sha256_file, write_png
from .objectives import gradient_info_value

MANIFEST_FIELDS = (
    "scene_id",
    "frame_idx",
    "condition_id",
    "path",
    "gamma",
    "contrast",
    "is_reference",
    "split",
    "sha256",
)
DEFAULT_SIZE = (64, 48)  # width, height
FULL_SCALE_SIZE = (160, 120)
N_CONDITIONS = 12
MAX_STEP = 3
TONE_RANGE = (0.42, 0.78)


class DataError(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LUMEN_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ImageFrame:
    pixels: np.ndarray  # [H, W] float64 in [0, 1]
    scene_id: int = 0
    frame_idx: int = 0
    condition_id: int = -1
    origin: tuple[int, int] = (0, 0)  # crop origin (x, y) on the scene canvas

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise DataError(f"ImageFrame needs a 2-D array, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError("ImageFrame intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray, condition_id: int | None = None) -> ImageFrame:
        return replace(
            self,
            pixels=np.clip(pixels, 0.0, 1.0),
            condition_id=self.condition_id if condition_id is None else condition_id,
        )


@dataclass(frozen=True)
class ConditionSpec:
    condition_id: int
    gamma: float
    contrast: float

    def __post_init__(self):
        if not (self.gamma > 0 and self.contrast > 0):
            raise DataError(f"condition {self.condition_id}: gamma and contrast must be positive")

    @property
    def is_identity(self) -> bool:
        return self.gamma == 1.0 and self.contrast == 1.0


def default_grid() -> list[ConditionSpec]:
    gammas = (0.4, 0.7, 1.0, 1.8)
    contrasts = (0.5, 1.0, 1.6)
    return [
        ConditionSpec(i * len(contrasts) + j, g, c) for i, g in enumerate(gammas) for j, c in enumerate(contrasts)
    ]


def validate_grid(grid, n_conditions: int = N_CONDITIONS) -> list[ConditionSpec]:
    grid = list(grid)
    if len(grid) != n_conditions:
        raise DataError(f"grid must have {n_conditions} conditions, got {len(grid)}")
    ids = [g.condition_id for g in grid]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate condition_id in grid")
    if len({(g.gamma, g.contrast) for g in grid}) != len(grid):
        raise DataError("grid contains repeated (gamma, contrast) pairs")
    n_identity = sum(g.is_identity for g in grid)
    if n_identity != 1:
        raise DataError(f"grid must contain exactly one identity condition, found {n_identity}")
    return sorted(grid, key=lambda g: g.condition_id)


def load_grid(path) -> list[ConditionSpec]:
    try:
        items = json.loads(Path(path).read_text())
        return validate_grid(ConditionSpec(int(d["condition_id"]), float(d["gamma"]), float(d["contrast"])) for d in items)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad grid file {path}: {exc}") from None


def dump_grid(grid) -> str:
    return json.dumps([asdict(g) for g in grid])


def identity_condition(grid) -> ConditionSpec:
    return next(g for g in grid if g.is_identity)


# -- scene generation --------------------------------------------------------


def _check_size(size) -> tuple[int, int]:
    w, h = (int(v) for v in size)
    if w <= 0 or h <= 0 or w % 8 or h % 8:
        raise DataError(f"dimensions must be divisible by 8, got {w}x{h}")
    return w, h


def render_canvas(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Soft-edged rectangles over a linear gradient plus band-limited noise."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (xx * np.cos(theta) + yy * np.sin(theta)) / max(width, height)
    canvas = rng.uniform(0.2, 0.8) + rng.uniform(-0.3, 0.3) * ramp

    n_rects = rng.integers(10, 20)
    for _ in range(n_rects):
        rw = rng.uniform(0.1, 0.5) * width
        rh = rng.uniform(0.1, 0.5) * height
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        soft = rng.uniform(0.5, 2.5)
        inside_x = 1.0 / (1.0 + np.exp(-(rw / 2 - np.abs(xx - cx)) / soft))
        inside_y = 1.0 / (1.0 + np.exp(-(rh / 2 - np.abs(yy - cy)) / soft))
        alpha = inside_x * inside_y
        canvas = canvas * (1 - alpha) + rng.uniform(0.0, 1.0) * alpha

    noise = gaussian_filter(rng.normal(size=(height, width)), sigma=rng.uniform(1.0, 2.5), mode="reflect")
    noise /= noise.std() + 1e-12
    canvas = canvas + rng.uniform(0.02, 0.06) * noise
    # squeeze into mid-tones so no grid condition clips the darkest pixels to zero
    lo, hi = TONE_RANGE
    return lo + (hi - lo) * np.clip(canvas, 0.0, 1.0)


def generate_scene(seed, frames: int, size=DEFAULT_SIZE, scene_id: int = 0) -> list[ImageFrame]:
    """Render ``frames`` consecutive crops of one procedural scene.

    ``size`` is ``(width, height)``. The crop origin advances by 1-3 px in x
    and -1..1 px in y per frame.
    """
    w, h = _check_size(size)
    if frames < 1:
        raise DataError("frames must be at least 1")
    rng = np.random.default_rng(seed)
    margin_x, margin_y = MAX_STEP * (frames - 1), frames - 1
    cw, ch = w + margin_x, h + 2 * margin_y
    canvas = render_canvas(rng, cw, ch)

    origins = [(0, margin_y)]
    for _ in range(frames - 1):
        x0, y0 = origins[-1]
        origins.append((x0 + int(rng.integers(1, MAX_STEP + 1)), y0 + int(rng.integers(-1, 2))))

    out = []
    for t, (x0, y0) in enumerate(origins):
        if x0 < 0 or y0 < 0 or x0 + w > cw or y0 + h > ch:
            raise DataError(f"crop at {(x0, y0)} exceeds canvas {cw}x{ch}")
        out.append(ImageFrame(canvas[y0 : y0 + h, x0 : x0 + w].copy(), scene_id, t, -1, (x0, y0)))
    return out


def apply_condition(frame, spec: ConditionSpec):
    """clamp((in ** gamma - 0.5) * contrast + 0.5, 0, 1)."""
    if not (spec.gamma > 0 and spec.contrast > 0):
        raise DataError("gamma and contrast must be positive")
    pixels = np.asarray(getattr(frame, "pixels", frame), dtype=np.float64)
    if spec.is_identity:
        out = pixels.copy()
    else:
        out = np.clip((np.power(pixels, spec.gamma) - 0.5) * spec.contrast + 0.5, 0.0, 1.0)
    if isinstance(frame, ImageFrame):
        return replace(frame, pixels=out, condition_id=spec.condition_id)
    return out


def select_reference(variants) -> int:
    """Index of the variant with the most gradient information.

    Ties go to the lowest ``condition_id`` (list position for plain arrays).
    """
    variants = list(variants)
    if not variants:
        raise DataError("select_reference needs at least one variant")
    shape = np.shape(getattr(variants[0], "pixels", variants[0]))
    scores = []
    for k, v in enumerate(variants):
        px = getattr(v, "pixels", v)
        if np.shape(px) != shape:
            raise DataError(f"variant {k} has shape {np.shape(px)}, expected {shape}")
        scores.append(gradient_info_value(px))
    best = max(scores)
    tied = [k for k, s in enumerate(scores) if s == best]
    return min(tied, key=lambda k: (getattr(variants[k], "condition_id", k), k))


# -- dataset -----------------------------------------------------------------


@dataclass
class DatasetManifest:
    records: list[dict]
    seed: int
    grid: list[ConditionSpec]
    root: Path = field(default=Path("."))

    def path_of(self, rec) -> Path:
        return self.root / rec["path"]

    def condition_histogram(self) -> dict[int, int]:
        hist = {g.condition_id: 0 for g in self.grid}
        for r in self.records:
            hist[r["condition_id"]] += 1
        return hist

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def poses(self, split: str | None = None) -> dict[tuple[int, int], dict[int, dict]]:
        """``(scene, frame) -> {condition_id: record}``."""
        out: dict[tuple[int, int], dict[int, dict]] = {}
        for r in self.records:
            if split is None or r["split"] == split:
                out.setdefault((r["scene_id"], r["frame_idx"]), {})[r["condition_id"]] = r
        return dict(sorted(out.items()))

    def reference(self, scene_id: int, frame_idx: int) -> dict:
        refs = [
            r for r in self.records if r["scene_id"] == scene_id and r["frame_idx"] == frame_idx and r["is_reference"]
        ]
        if len(refs) != 1:
            raise DataError(f"pose ({scene_id}, {frame_idx}) has {len(refs)} reference records")
        return refs[0]

    def write(self, path) -> None:
        lines = [json.dumps({k: r[k] for k in MANIFEST_FIELDS}) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")


def _grid_from_records(records) -> list[ConditionSpec]:
    seen = {}
    for r in records:
        seen.setdefault(r["condition_id"], ConditionSpec(r["condition_id"], r["gamma"], r["contrast"]))
    return [seen[k] for k in sorted(seen)]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise DataError(f"{path}:{n}: record lacks fields {missing}")
        records.append(rec)
    meta_path = path.parent / "dataset.json"
    seed = json.loads(meta_path.read_text())["seed"] if meta_path.is_file() else 0
    return DatasetManifest(records, seed, _grid_from_records(records), path.parent)


def check_manifest(manifest: DatasetManifest) -> None:
    """Referential integrity: every file exists, hashes and shapes agree."""
    shape = None
    for r in manifest.records:
        p = manifest.path_of(r)
        if not p.is_file():
            raise DataError(f"missing image {p}")
        if sha256_file(p) != r["sha256"]:
            raise DataError(f"hash mismatch for {p}")
        px = read_png(p)
        if shape is None:
            shape = px.shape
        elif px.shape != shape:
            raise DataError(f"{p} has shape {px.shape}, expected {shape}")
    for scene, frame in manifest.poses():
        manifest.reference(scene, frame)


def _split_scenes(n_scenes: int, ratio: float, rng) -> set[int]:
    if not 0 <= ratio < 1:
        raise DataError(f"split ratio must be in [0, 1), got {ratio}")
    n_hold = int(round(ratio * n_scenes))
    if ratio > 0 and n_scenes > 1:
        n_hold = max(1, n_hold)
    n_hold = min(n_hold, n_scenes - 1)
    return set(int(s) for s in rng.permutation(n_scenes)[:n_hold])


def build_dataset(
    scenes: int,
    frames: int,
    out_dir,
    grid=None,
    size=DEFAULT_SIZE,
    split_ratio: float = 0.1,
    seed: int = 0,
) -> DatasetManifest:
    """Render, condition, quantize and store ``scenes x frames x len(grid)`` images.

    Writes ``manifest.jsonl``, ``grid.json`` and ``dataset.json`` in ``out_dir``.
    """
    grid = validate_grid(default_grid() if grid is None else grid)
    size = _check_size(size)
    if scenes < 1:
        raise DataError("need at least one scene")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    root_ss = np.random.SeedSequence(seed)
    scene_seeds = root_ss.spawn(scenes)
    holdout = _split_scenes(scenes, split_ratio, np.random.default_rng(root_ss.spawn(1)[0]))

    def render(s: int) -> list[dict]:
        recs = []
        for frame in generate_scene(scene_seeds[s], frames, size, scene_id=s):
            variants = [quantize8(apply_condition(frame.pixels, spec)) for spec in grid]
            ref = select_reference(
                [ImageFrame(v, s, frame.frame_idx, spec.condition_id) for v, spec in zip(variants, grid)]
            )
            for k, (v, spec) in enumerate(zip(variants, grid)):
                rel = f"images/s{s:03d}_f{frame.frame_idx:03d}_c{spec.condition_id:02d}.png"
                digest = write_png(out / rel, v)
                recs.append(
                    {
                        "scene_id": s,
                        "frame_idx": frame.frame_idx,
                        "condition_id": spec.condition_id,
                        "path": rel,
                        "gamma": spec.gamma,
                        "contrast": spec.contrast,
                        "is_reference": k == ref,
                        "split": "holdout" if s in holdout else "train",
                        "sha256": digest,
                    }
                )
        return recs

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        per_scene = list(pool.map(render, range(scenes)))
    records = [r for recs in per_scene for r in recs]

    manifest = DatasetManifest(records, seed, grid, out)
    manifest.write(out / "manifest.jsonl")
    (out / "grid.json").write_text(dump_grid(grid) + "\n")
    meta = {
        "seed": seed,
        "scenes": scenes,
        "frames": frames,
        "size": list(size),
        "split_ratio": split_ratio,
        "holdout_scenes": sorted(holdout),
    }
    (out / "dataset.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return manifest


# -- samplers ----------------------------------------------------------------


def pair_samples(manifest: DatasetManifest, split: str = "train") -> list[tuple[dict, dict]]:
    """(variant, reference) at one pose; the reference itself is never a variant."""
    out = []
    for (scene, frame), by_cond in manifest.poses(split).items():
        ref = manifest.reference(scene, frame)
        out.extend((r, ref) for c, r in sorted(by_cond.items()) if c != ref["condition_id"])
    return out


def triplet_samples(manifest: DatasetManifest, split: str = "train") -> list[tuple[dict, dict, dict]]:
    """(y1, y2, reference) at one pose with two distinct non-reference conditions."""
    out = []
    for (scene, frame), by_cond in manifest.poses(split).items():
        ref = manifest.reference(scene, frame)
        conds = [c for c in sorted(by_cond) if c != ref["condition_id"]]
        for i, a in enumerate(conds):
            for b in conds[i + 1 :]:
                out.append((by_cond[a], by_cond[b], ref))
    return out


def neighbour_conditions(grid, k: int = 3) -> dict[int, list[int]]:
    """For each condition, the ``k`` closest others in (log gamma, log contrast)."""
    pts = {g.condition_id: np.array([np.log(g.gamma), np.log(g.contrast)]) for g in grid}
    out = {}
    for cid, p in pts.items():
        others = sorted((float(np.linalg.norm(p - q)), oid) for oid, q in pts.items() if oid != cid)
        out[cid] = [oid for _, oid in others[:k]]
    return out


def temporal_samples(manifest: DatasetManifest, split: str = "train") -> list[tuple[dict, dict, dict, dict]]:
    """(x_t, x_t+1, ref_t, ref_t+1) over consecutive frames of one scene.

    The two inputs are under neighbouring (slightly different) conditions; both
    references use the identity condition so they share one brightness.
    """
    poses = manifest.poses(split)
    ident = identity_condition(manifest.grid).condition_id
    nbrs = neighbour_conditions(manifest.grid)
    out = []
    for (scene, frame), by_cond in poses.items():
        nxt = poses.get((scene, frame + 1))
        if nxt is None:
            continue
        for c in sorted(by_cond):
            for c2 in nbrs[c]:
                out.append((by_cond[c], nxt[c2], by_cond[ident], nxt[ident]))
    return out


def flicker_sequences(manifest: DatasetManifest, split: str = "holdout", seed: int = 0) -> list[list[dict]]:
    """One sequence per scene in frame order, the condition hopping to a
    neighbouring one at every frame."""
    rng = np.random.default_rng(seed)
    nbrs = neighbour_conditions(manifest.grid)
    poses = manifest.poses(split)
    scenes = sorted({s for s, _ in poses})
    seqs = []
    for s in scenes:
        frames = sorted(f for sc, f in poses if sc == s)
        cond = int(rng.choice(sorted(poses[(s, frames[0])])))
        seq = []
        for f in frames:
            seq.append(poses[(s, f)][cond])
            cond = int(rng.choice(nbrs[cond]))
        seqs.append(seq)
    return seqs


class ImageCache:
    """Decoded dataset images keyed by manifest path."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, rec: dict) -> np.ndarray:
        key = rec["path"]
        if key not in self._cache:
            self._cache[key] = read_png(self.manifest.path_of(rec))
        return self._cache[key]
