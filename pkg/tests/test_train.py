import json

import numpy as np
import pytest

from lumen import tensor as T
from lumen.checkpoint import read_checkpoint, save_checkpoint
from lumen.model import Enhancer
from lumen.objectives import NO_STRUCTURE, dssim, log_rmse
from lumen.synth import build_dataset
from lumen.tensor import Tensor
from lumen.train import (
    DEFAULT_EPOCHS,
    LEARNING_RATE,
    AdamState,
    ArchitectureError,
    NumericError,
    Sample,
    StageOrderError,
    TrainConfig,
    adam_step,
    clip_global_norm,
    fit,
    run_stage,
    siamese_outputs,
    temporal_loss,
    train_siamese,
    train_temporal,
)

SMALL = (2, 2, 4)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return build_dataset(4, 3, tmp_path_factory.mktemp("ds"), size=(16, 16), split_ratio=0.25, seed=1)


def small_cfg(stage, **kw):
    base = dict(stage=stage, epochs=2, max_samples=8, holdout_samples=4, batch_size=4, widths=SMALL, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig(**base)


# -- Adam ----------------------------------------------------------------------


def test_adam_first_step():
    p = {"w": Tensor(np.zeros(1), requires_grad=True)}
    adam_step(p, {"w": np.ones(1)}, AdamState(lr=0.1))
    assert p["w"].data[0] == pytest.approx(-0.1, abs=1e-7)


def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([0.3, -2.0]), requires_grad=True)}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert p["w"].data.tolist() == [0.3, -2.0]


def test_adam_zero_lr_is_bitwise_noop():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 4)).astype(np.float32)
    p = {"w": Tensor(w.copy(), requires_grad=True)}
    state = AdamState(lr=0.0)
    for _ in range(3):
        adam_step(p, {"w": rng.normal(size=(3, 4)).astype(np.float32)}, state)
    assert p["w"].data.tobytes() == w.tobytes()
    assert state.t == 3


def test_adam_rejects_nonfinite():
    p = {"enc0.conv.weight": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(NumericError, match=r"enc0.conv.weight at step 1"):
        adam_step(p, {"enc0.conv.weight": np.array([1.0, np.nan])}, AdamState())


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


# -- configuration -------------------------------------------------------------


def test_defaults():
    assert TrainConfig().learning_rate == LEARNING_RATE == 1e-4
    assert TrainConfig(stage="pretrain").epochs == 20
    assert TrainConfig(stage="siamese").epochs == TrainConfig(stage="temporal").epochs == 10
    assert TrainConfig().batch_size == 8 and TrainConfig().lambda_ssim == 0.5


@pytest.mark.parametrize(
    "kw", [dict(epochs=0), dict(lambda_log=0.0, lambda_ssim=0.0), dict(lambda_log=-1.0), dict(stage="finetune")]
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_roundtrip(tmp_path):
    cfg = TrainConfig(stage="siamese", seed=4, max_iterations=7)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert TrainConfig.from_json(p) == cfg


def test_config_unknown_field():
    with pytest.raises(ValueError, match="unknown config fields"):
        TrainConfig.from_dict({"stage": "pretrain", "momentum": 0.9})


# -- stage ordering ------------------------------------------------------------


def test_siamese_without_checkpoint(manifest):
    with pytest.raises(StageOrderError):
        train_siamese(small_cfg("siamese"), manifest=manifest)


def test_siamese_on_untrained_model(manifest):
    with pytest.raises(StageOrderError, match="tagged pretrain"):
        train_siamese(small_cfg("siamese"), model=Enhancer(SMALL), manifest=manifest)


def test_temporal_on_nonrecurrent_model(manifest):
    m = Enhancer(SMALL)
    m.stage = "siamese"
    with pytest.raises(ArchitectureError):
        train_temporal(small_cfg("temporal"), model=m, manifest=manifest)


def test_stage_mismatch_in_config(manifest):
    with pytest.raises(ValueError, match="not 'siamese'"):
        train_siamese(small_cfg("pretrain"), manifest=manifest)


# -- training runs -------------------------------------------------------------


def test_full_protocol_writes_logs_and_checkpoints(manifest, tmp_path):
    c1, c2, c3 = (tmp_path / f"{s}.ckpt" for s in ("pre", "sia", "tmp"))
    r1 = run_stage(small_cfg("pretrain", out_checkpoint=str(c1), log_path=str(tmp_path / "pre.jsonl")), manifest=manifest)
    assert r1.model.stage == "pretrain" and len(r1.log) == 2
    lines = [json.loads(s) for s in (tmp_path / "pre.jsonl").read_text().splitlines()]
    assert [set(rec) for rec in lines] == [{"stage", "epoch", "mean_loss", "holdout_loss", "wall_ms", "seed"}] * 2
    assert all(np.isfinite(rec["mean_loss"]) for rec in lines)

    r2 = run_stage(small_cfg("siamese", init_checkpoint=str(c1), out_checkpoint=str(c2)), manifest=manifest)
    assert r2.model.stage == "siamese"
    r3 = run_stage(small_cfg("temporal", init_checkpoint=str(c2), out_checkpoint=str(c3)), manifest=manifest)
    model, meta = read_checkpoint(c3)
    assert model.stage == "temporal" and model.recurrent
    assert meta["adam_reset"].tolist() == [1.0]
    assert meta["iterations"].tolist() == [float(r3.iterations)]


def test_training_is_deterministic(manifest, tmp_path):
    def run(tag):
        ck = tmp_path / f"{tag}.ckpt"
        res = run_stage(small_cfg("pretrain", out_checkpoint=str(ck)), manifest=manifest)
        return ck.read_bytes(), [{k: v for k, v in r.items() if k != "wall_ms"} for r in res.log]

    assert run("a") == run("b")


def test_max_iterations_caps_steps(manifest):
    res = run_stage(small_cfg("pretrain", epochs=5, max_iterations=3), manifest=manifest)
    assert res.iterations == 3 and len(res.log) == 2


def test_nan_batch_aborts_with_record_ids():
    bad = np.full((16, 16), np.nan)
    good = np.full((16, 16), 0.5)
    samples = [Sample((bad, good), ("images/bad.png", "images/ref.png"))]
    with pytest.raises(NumericError, match="images/bad.png"):
        fit(Enhancer(SMALL), samples, small_cfg("pretrain"))


def test_resume_checkpoint_continues_weights(manifest, tmp_path):
    m = Enhancer(SMALL, seed=5)
    m.stage = "pretrain"
    ck = tmp_path / "p.ckpt"
    save_checkpoint(m, ck)
    res = run_stage(small_cfg("siamese", init_checkpoint=str(ck), learning_rate=0.0), manifest=manifest)
    params = {k: v for k, v in res.model.state_dict().items() if "running" not in k}
    for k, v in params.items():
        assert v.tobytes() == m.state_dict()[k].tobytes()


# -- stage losses --------------------------------------------------------------


def test_siamese_branches_share_parameters():
    m = Enhancer(SMALL, seed=2)
    rng = np.random.default_rng(0)
    y1 = Tensor(rng.uniform(size=(2, 1, 16, 16)).astype(np.float32))
    y2 = Tensor(rng.uniform(size=(2, 1, 16, 16)).astype(np.float32))
    before = m.digest()
    o1, o2 = siamese_outputs(m, y1, y2, train=False)
    assert np.array_equal(o1.data, m(y1)[0].data) and np.array_equal(o2.data, m(y2)[0].data)
    assert m.digest() == before


def test_temporal_loss_uses_no_structure_ssim():
    m = Enhancer(SMALL, recurrent=True, seed=3).astype(np.float64)
    rng = np.random.default_rng(1)
    batch = [Tensor(rng.uniform(0.1, 1, size=(2, 1, 16, 16))) for _ in range(4)]
    cfg = small_cfg("temporal")
    got = temporal_loss(m, batch, cfg, train=False).item()
    o0, s = m(batch[0], m.zero_state(2))
    o1, _ = m(batch[1], s)
    want = log_rmse(o0, batch[2]).item() + log_rmse(o1, batch[3]).item() + 0.5 * dssim(o0, o1, NO_STRUCTURE).item()
    assert got == pytest.approx(want, rel=1e-12)


def test_pretrain_reduces_loss_on_tiny_set():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.5, size=(4, 16, 16))
    samples = [Sample((a, np.clip(a * 1.5, 0, 1))) for a in x]
    res = fit(Enhancer(SMALL, seed=1), samples, small_cfg("pretrain", epochs=40, learning_rate=1e-2))
    assert res.log[-1]["mean_loss"] < 0.8 * res.log[0]["mean_loss"]


def test_default_epoch_table():
    assert DEFAULT_EPOCHS == {"pretrain": 20, "siamese": 10, "temporal": 10}


def test_gradient_reaches_every_parameter():
    m = Enhancer(SMALL, recurrent=True, seed=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 16, 16)).astype(np.float32))
    o0, s = m(x, train=True)
    o1, _ = m(x, s, train=True)
    T.mean(o0 + o1).backward()
    for name, p in m.parameters().items():
        assert p.grad is not None and np.any(p.grad != 0), name
