import json

import numpy as np
import pytest

from lumen.checkpoint import save_checkpoint
from lumen.cli import defaults, main
from lumen.imageio import read_png, write_png
from lumen.model import Enhancer


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--scenes", "5", "--frames", "4", "--size", "16x16", "--seed", "7"]) == 0
    return out


def test_gen_data_counts(data_dir, capsys):
    assert len(list((data_dir / "images").glob("*.png"))) == 5 * 4 * 12
    lines = (data_dir / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 240


def test_gen_data_same_seed_same_hashes(data_dir, tmp_path):
    other = tmp_path / "again"
    assert main(["gen-data", "--out", str(other), "--scenes", "5", "--frames", "4", "--size", "16x16", "--seed", "7"]) == 0
    assert (other / "manifest.jsonl").read_bytes() == (data_dir / "manifest.jsonl").read_bytes()


def test_gen_data_bad_size(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--size", "100x100"]) == 2
    assert "dimensions must be divisible by 8" in capsys.readouterr().err


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "x"), "--scenes", "1", "--frames", "1", "--size", "8x8"]) == 3


def test_gen_data_bad_grid(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([{"condition_id": 0, "gamma": 1.0, "contrast": 1.0}]))
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--grid", str(grid)]) == 2


def test_train_siamese_without_checkpoint(data_dir, tmp_path):
    code = main(["train", "--stage", "siamese", "--data", str(data_dir / "manifest.jsonl"), "--out", str(tmp_path / "s.ckpt")])
    assert code == 4


def test_train_print_config_defaults(capsys):
    assert main(["train", "--print-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["epochs"] == 20 and cfg["learning_rate"] == 0.0001


def test_train_bad_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"momentum": 0.9}))
    assert main(["train", "--config", str(cfg), "--print-config"]) == 2


def test_train_pipeline_and_enhance(data_dir, tmp_path):
    manifest = str(data_dir / "manifest.jsonl")
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"widths": [2, 2, 4], "max_samples": 8, "holdout_samples": 4}))
    pre, sia, tmp = (str(tmp_path / f"{s}.ckpt") for s in ("pre", "sia", "tmp"))
    common = ["--data", manifest, "--config", str(cfg), "--epochs", "1"]
    assert main(["train", "--stage", "pretrain", *common, "--out", pre]) == 0
    log = [json.loads(s) for s in open(pre + ".log.jsonl")]
    assert len(log) == 1 and log[0]["stage"] == "pretrain"
    assert main(["train", "--stage", "temporal", *common, "--out", tmp, "--resume", pre]) == 4
    assert main(["train", "--stage", "siamese", *common, "--out", sia, "--resume", pre]) == 0
    assert main(["train", "--stage", "temporal", *common, "--out", tmp, "--resume", sia]) == 0

    src = tmp_path / "in"
    src.mkdir()
    for name in ("s000_f000.png", "s000_f001.png", "s001_f000.png"):
        write_png(src / name, np.random.default_rng(len(name)).uniform(size=(16, 16)))
    assert main(["enhance", "--model", sia, "--in", str(src), "--out", str(tmp_path / "o1")]) == 0
    outs = sorted(p.name for p in (tmp_path / "o1").glob("*.png"))
    assert outs == ["s000_f000.png", "s000_f001.png", "s001_f000.png"]
    assert main(["enhance", "--model", sia, "--in", str(src), "--out", str(tmp_path / "o2"), "--recurrent"]) == 6
    assert main(["enhance", "--model", tmp, "--in", str(src), "--out", str(tmp_path / "o3")]) == 6
    assert main(["enhance", "--model", tmp, "--in", str(src), "--out", str(tmp_path / "o3"), "--recurrent"]) == 0

    report = tmp_path / "r.json"
    assert main(["eval", "--method", tmp, "--data", manifest, "--report", str(report), "--sequence", "flicker"]) == 0
    rep = json.loads(report.read_text())
    assert rep["metadata"]["method_kind"] == "model"


def test_enhance_missing_checkpoint(tmp_path):
    assert main(["enhance", "--model", str(tmp_path / "nope"), "--in", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_enhance_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"VOEN\x01")
    assert main(["enhance", "--model", str(bad), "--in", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_enhance_indivisible_image(tmp_path):
    ck = tmp_path / "m.ckpt"
    save_checkpoint(Enhancer((2, 2, 2)), ck)
    (tmp_path / "in").mkdir()
    write_png(tmp_path / "in" / "a.png", np.zeros((10, 16)))
    assert main(["enhance", "--model", str(ck), "--in", str(tmp_path / "in"), "--out", str(tmp_path / "o")]) == 2


def test_baseline_constant_unchanged(tmp_path):
    write_png(tmp_path / "c.png", np.full((8, 8), 0.4))
    assert main(["baseline", "--method", "ghe", "--in", str(tmp_path / "c.png"), "--out", str(tmp_path / "o.png")]) == 0
    assert (tmp_path / "o.png").read_bytes() == (tmp_path / "c.png").read_bytes()


def test_baseline_directory(tmp_path):
    (tmp_path / "in").mkdir()
    for k in range(3):
        write_png(tmp_path / "in" / f"{k}.png", np.random.default_rng(k).uniform(size=(16, 16)))
    assert main(["baseline", "--method", "ahe", "--tiles", "2x2", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "o")]) == 0
    outs = [read_png(tmp_path / "o" / f"{k}.png") for k in range(3)]
    assert all(o.shape == (16, 16) for o in outs)


def test_baseline_unknown_method(tmp_path, capsys):
    write_png(tmp_path / "c.png", np.full((8, 8), 0.4))
    assert main(["baseline", "--method", "sharpen", "--in", str(tmp_path / "c.png"), "--out", str(tmp_path / "o.png")]) == 2
    assert "ahe" in capsys.readouterr().err


def test_eval_identity(data_dir, tmp_path):
    report = tmp_path / "r.json"
    assert main(["eval", "--method", "identity", "--data", str(data_dir / "manifest.jsonl"), "--report", str(report)]) == 0
    rep = json.loads(report.read_text())
    assert all(r["gradient_gain"] == 1.0 for r in rep["records"])


def test_eval_unknown_method(data_dir, tmp_path, capsys):
    code = main(["eval", "--method", "sharpen", "--data", str(data_dir / "manifest.jsonl"), "--report", str(tmp_path / "r.json")])
    assert code == 2
    err = capsys.readouterr().err
    assert "identity" in err and "ghe" in err


def test_eval_missing_manifest(tmp_path):
    assert main(["eval", "--method", "identity", "--data", str(tmp_path / "m.jsonl"), "--report", str(tmp_path / "r.json")]) == 2


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit):
        from lumen.cli import build_parser

        build_parser().parse_args(["train", "--help"])
    out = capsys.readouterr().out
    assert "0.0001" in out and "pretrain=20" in out and "siamese=10" in out


def test_bad_subcommand_exit_code():
    assert main(["frobnicate"]) == 2


def test_defaults_command(capsys):
    assert main(["defaults"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d == json.loads(json.dumps(defaults()))
    assert d["n_conditions"] == 12 and d["gradient_map_range"] == 30


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("LUMEN_THREADS", "2")
    out = tmp_path / "d"
    assert main(["gen-data", "--out", str(out), "--scenes", "2", "--frames", "1", "--size", "8x8"]) == 0
