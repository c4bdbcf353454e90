"""Command line entry point: ``lumen <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 stage order
violation, 5 non-finite numerics, 6 architecture mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import synth
from .baselines import BASELINES, DEFAULT_CLIP, DEFAULT_TILES, adaptive_he, get_baseline
from .checkpoint import CheckpointError, read_checkpoint
from .evaluate import GRADIENT_MAP_RANGE, SEQUENCE_MODES, evaluate
from .imageio import read_png, write_png
from .train import (
    DEFAULT_EPOCHS,
    DEFAULT_SAMPLES,
    LEARNING_RATE,
    FULL_SCALE_SAMPLES,
    ArchitectureError,
    NumericError,
    StageOrderError,
    TrainConfig,
    run_stage,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STAGE, EXIT_NUMERIC, EXIT_ARCH = 0, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    """Every user-facing default in one place (also printed by ``lumen defaults``)."""
    return {
        "learning_rate": LEARNING_RATE,
        "epochs": dict(DEFAULT_EPOCHS),
        "desk_samples": dict(DEFAULT_SAMPLES),
        "full_scale_samples": dict(FULL_SCALE_SAMPLES),
        "n_conditions": synth.N_CONDITIONS,
        "grid": [{"condition_id": g.condition_id, "gamma": g.gamma, "contrast": g.contrast} for g in synth.default_grid()],
        "gradient_map_range": GRADIENT_MAP_RANGE,
        "image_size": "{}x{}".format(*synth.DEFAULT_SIZE),
        "train": TrainConfig().to_dict(),
        "ahe": {"tiles": list(DEFAULT_TILES), "clip_limit": DEFAULT_CLIP},
    }


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like WxH, got {text!r}") from None


def _pngs(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"input directory {d} does not exist")
    return sorted(d.glob("*.png"), key=lambda p: p.name)


def _scene_key(path: Path) -> str:
    return path.stem.split("_")[0]


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    grid = synth.load_grid(args.grid) if args.grid else None
    manifest = synth.build_dataset(args.scenes, args.frames, args.out, grid=grid, size=args.size, split_ratio=args.split, seed=args.seed)
    print(Path(args.out) / "manifest.jsonl")
    for cid, n in manifest.condition_histogram().items():
        print(f"condition {cid:2d}: {n}")
    return EXIT_OK


TRAIN_FLAGS = ("epochs", "batch_size", "learning_rate", "seed", "max_samples", "max_iterations")


def _train_config(args) -> TrainConfig:
    d = {}
    if args.config:
        d.update(json.loads(Path(args.config).read_text()))
    d["stage"] = args.stage
    for k in TRAIN_FLAGS:
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    if args.data:
        d["manifest"] = str(args.data)
    if args.resume:
        d["init_checkpoint"] = str(args.resume)
    if args.out:
        d["out_checkpoint"] = str(args.out)
        d.setdefault("log_path", str(args.log) if args.log else str(args.out) + ".log.jsonl")
    try:
        return TrainConfig.from_dict(d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not cfg.manifest or not cfg.out_checkpoint:
        raise ConfigError("train needs --data and --out")
    if cfg.stage != "pretrain" and not cfg.init_checkpoint:
        raise StageOrderError(f"stage {cfg.stage!r} needs --resume with the previous stage's checkpoint")
    result = run_stage(cfg)
    last = result.log[-1]
    print(f"{cfg.stage}: {len(result.log)} epochs, {result.iterations} iterations, final mean loss {last['mean_loss']:.6f}")
    print(cfg.out_checkpoint)
    return EXIT_OK


def cmd_enhance(args) -> int:
    model, _ = read_checkpoint(args.model)
    if args.recurrent != model.recurrent:
        kind = "recurrent" if model.recurrent else "non-recurrent"
        raise ArchitectureError(f"checkpoint holds a {kind} model but --recurrent is {'set' if args.recurrent else 'not set'}")
    files = _pngs(args.inp)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[Path]] = {}
    for f in files:
        groups.setdefault(_scene_key(f), []).append(f)
    for _, paths in sorted(groups.items()):
        state = model.zero_state(1) if model.recurrent else None
        for p in paths:
            img = read_png(p)
            model.check_input((1, 1) + img.shape)
            out, state = model.enhance(img, state)
            write_png(out_dir / p.name, out)
    print(f"enhanced {len(files)} images into {out_dir}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    fn = get_baseline(args.method)
    tiles = args.tiles

    def apply(img):
        return adaptive_he(img, tiles, args.clip_limit) if fn is adaptive_he else fn(img)

    src = Path(args.inp)
    if src.is_file():
        write_png(args.out, apply(read_png(src)))
        print(args.out)
        return EXIT_OK
    files = _pngs(src)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in files:
        write_png(out_dir / p.name, apply(read_png(p)))
    print(f"{args.method}: wrote {len(files)} images into {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    method = args.method
    if method != "identity" and method not in BASELINES and not Path(method).is_file():
        raise ConfigError(f"unknown method {method!r}; valid methods: identity, {', '.join(sorted(BASELINES))}, or a checkpoint path")
    manifest = synth.load_manifest(args.data)
    report = evaluate(
        method,
        manifest,
        report_path=args.report,
        maps_dir=args.maps,
        sequence=args.sequence,
        conditions=args.conditions,
        seed=args.seed,
    )
    gain = report["aggregates"]["gradient_gain"]
    print(f"{report['metadata']['n_images']} images, mean gain {gain['mean']}, median gain {gain['median']}")
    print(args.report)
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(json.dumps(defaults(), indent=2, sort_keys=True))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="lumen", description="Learned and classical image enhancement for visual odometry.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--scenes", type=int, default=10, help="number of scenes")
    g.add_argument("--frames", type=int, default=4, help="frames per scene")
    g.add_argument("--size", type=_size, default="{}x{}".format(*synth.DEFAULT_SIZE), help="image size WxH")
    g.add_argument("--grid", default=None, help="JSON file with the 12 gamma/contrast conditions")
    g.add_argument("--split", type=float, default=0.1, help="fraction of scenes held out")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.set_defaults(func=cmd_gen_data)

    base = TrainConfig()
    t = sub.add_parser("train", help="train one stage", formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--stage", choices=tuple(DEFAULT_EPOCHS), default="pretrain", help="training stage (default: pretrain)")
    t.add_argument("--data", default=None, help="dataset manifest.jsonl")
    t.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    t.add_argument("--out", default=None, help="checkpoint to write")
    t.add_argument("--resume", default=None, help="checkpoint of the previous stage")
    t.add_argument("--log", default=None, help="JSON-lines training log (default: <out>.log.jsonl)")
    epochs = ", ".join(f"{k}={v}" for k, v in DEFAULT_EPOCHS.items())
    t.add_argument("--epochs", type=int, default=None, help=f"epochs (default: {epochs})")
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None, help=f"batch size (default: {base.batch_size})")
    t.add_argument("--lr", dest="learning_rate", type=float, default=None, help=f"Adam learning rate (default: {LEARNING_RATE})")
    t.add_argument("--seed", type=int, default=None, help=f"random seed (default: {base.seed})")
    samples = ", ".join(f"{k}={v}" for k, v in DEFAULT_SAMPLES.items())
    t.add_argument("--max-samples", dest="max_samples", type=int, default=None, help=f"training samples drawn from the manifest (default: {samples})")
    t.add_argument("--max-iterations", dest="max_iterations", type=int, default=None, help="stop after this many optimizer steps (default: no limit)")
    t.add_argument("--print-config", dest="print_config", action="store_true", help="print the resolved configuration and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a directory of PNG images", formatter_class=fmt)
    e.add_argument("--model", required=True, help="checkpoint")
    e.add_argument("--in", dest="inp", required=True, help="input directory")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--recurrent", action="store_true", help="the checkpoint holds a recurrent model")
    e.add_argument("--seed", type=int, default=0, help="random seed (inference is deterministic)")
    e.set_defaults(func=cmd_enhance)

    b = sub.add_parser("baseline", help="apply a classical baseline", formatter_class=fmt)
    b.add_argument("--method", required=True, help=f"one of {', '.join(sorted(BASELINES))}")
    b.add_argument("--in", dest="inp", required=True, help="input PNG or directory")
    b.add_argument("--out", required=True, help="output PNG or directory")
    b.add_argument("--tiles", type=_size, default="{}x{}".format(*DEFAULT_TILES), help="adaptive tile grid RxC")
    b.add_argument("--clip-limit", dest="clip_limit", type=float, default=DEFAULT_CLIP, help="adaptive clip limit (multiple of the mean bin count)")
    b.add_argument("--seed", type=int, default=0, help="random seed (baselines are deterministic)")
    b.set_defaults(func=cmd_baseline)

    v = sub.add_parser("eval", help="evaluate a method on the holdout split", formatter_class=fmt)
    v.add_argument("--method", required=True, help=f"identity, {', '.join(sorted(BASELINES))}, or a checkpoint path")
    v.add_argument("--data", required=True, help="dataset manifest.jsonl")
    v.add_argument("--report", required=True, help="JSON report to write")
    v.add_argument("--maps", default=None, help="directory for gradient-difference maps")
    v.add_argument("--sequence", choices=SEQUENCE_MODES, default="condition", help="how holdout frames are chained")
    v.add_argument("--conditions", type=int, nargs="+", default=None, help="restrict to these condition ids")
    v.add_argument("--seed", type=int, default=0, help="random seed for flicker sequences")
    v.set_defaults(func=cmd_eval)

    d = sub.add_parser("defaults", help="print all defaults as JSON", formatter_class=fmt)
    d.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    d.set_defaults(func=cmd_defaults)
    return p


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except StageOrderError as e:
        code, msg = EXIT_STAGE, e
    except (NumericError, FloatingPointError) as e:
        code, msg = EXIT_NUMERIC, e
    except ArchitectureError as e:
        code, msg = EXIT_ARCH, e
    except (CheckpointError, OSError) as e:
        code, msg = EXIT_IO, e
    except (ConfigError, ValueError, json.JSONDecodeError) as e:
        code, msg = EXIT_CONFIG, e
    print(f"lumen: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    with threadpool_limits(limits=synth.worker_count()):
        return _dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
