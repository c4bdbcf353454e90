import json

import numpy as np
import pytest
from PIL import Image

from lumen.baselines import normalize
from lumen.checkpoint import save_checkpoint
from lumen.evaluate import (
    GRADIENT_MAP_RANGE,
    JET_ANCHORS,
    aggregate,
    dumps_report,
    evaluate,
    gradient_diff_map,
    gradient_gain,
    jet,
    load_report,
    resolve_method,
)
from lumen.model import Enhancer
from lumen.objectives import gradient_info_value
from lumen.synth import build_dataset


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    return build_dataset(4, 3, tmp_path_factory.mktemp("ds"), size=(16, 16), split_ratio=0.25, seed=2)


def test_jet_anchor_colours():
    d = np.array([-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0])
    np.testing.assert_array_equal(jet(d), JET_ANCHORS.astype(np.uint8))


def test_jet_endpoints_and_midpoint():
    assert jet(np.array(-30.0)).tolist() == [0, 0, 255]
    assert jet(np.array(0.0)).tolist() == [0, 255, 0]
    assert jet(np.array(30.0)).tolist() == [255, 0, 0]


def test_jet_clamps():
    assert jet(np.array(100.0)).tolist() == jet(np.array(30.0)).tolist()
    assert jet(np.array(-1e6)).tolist() == jet(np.array(-30.0)).tolist()


def test_diff_map_identical_is_green():
    x = np.random.default_rng(0).uniform(size=(8, 9))
    m = gradient_diff_map(x, x)
    assert m.shape == (8, 9, 3) and m.dtype == np.uint8
    assert np.all(m == [0, 255, 0])


def test_diff_map_doubling_is_warm():
    x = np.random.default_rng(1).uniform(0.1, 0.4, size=(10, 10))
    m = gradient_diff_map(x, 2 * x)
    g = np.hypot(*np.gradient(x))  # any nonzero gradient region
    warm = (m[..., 0] > 0) & (m[..., 2] == 0)
    assert np.all(warm[g > 0])


def test_diff_map_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        gradient_diff_map(np.zeros((4, 4)), np.zeros((4, 5)))


def test_gain_conventions():
    assert gradient_gain(0.0, 0.0) == 1.0
    assert gradient_gain(2.0, 5.0) == 2.5
    assert gradient_gain(0.0, 1.0) is None


def test_normalize_gain_is_25():
    x = np.random.default_rng(2).uniform(0.4, 0.6, size=(32, 32))
    x[0, 0], x[-1, -1] = 0.4, 0.6
    gain = gradient_gain(gradient_info_value(x), gradient_info_value(normalize(x)))
    assert gain == pytest.approx(25.0, rel=1e-12)


def test_identity_report(manifest, tmp_path):
    rep = evaluate("identity", manifest, report_path=tmp_path / "r.json", maps_dir=tmp_path / "maps")
    assert rep["metadata"]["n_images"] == 3 * 12
    assert all(r["gradient_gain"] == 1.0 for r in rep["records"])
    assert all(r["log_rmse_to_reference"] == r["log_rmse_input_to_reference"] for r in rep["records"])
    assert rep["aggregates"]["gradient_gain"]["fraction_above_1"] == 0.0
    assert rep["metadata"]["gradient_map_range"] == GRADIENT_MAP_RANGE == 30
    maps = sorted((tmp_path / "maps").glob("*.graddiff.png"))
    assert len(maps) == 36
    with Image.open(maps[0]) as im:
        assert im.mode == "RGB" and np.all(np.asarray(im) == [0, 255, 0])


def test_report_roundtrip_and_aggregates(manifest, tmp_path):
    path = tmp_path / "r.json"
    rep = evaluate("ghe", manifest, report_path=path)
    text = path.read_text()
    parsed = load_report(path)
    assert dumps_report(parsed) == text
    assert parsed["aggregates"] == aggregate(parsed["records"])
    assert parsed == json.loads(dumps_report(rep))


def test_reports_are_deterministic(manifest, tmp_path):
    model = Enhancer((2, 2, 4), recurrent=True, seed=1)
    ck = tmp_path / "m.ckpt"
    save_checkpoint(model, ck)
    evaluate(str(ck), manifest, report_path=tmp_path / "a.json", sequence="flicker", seed=4)
    evaluate(str(ck), manifest, report_path=tmp_path / "b.json", sequence="flicker", seed=4)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_consecutive_dssim_only_after_first_frame(manifest):
    rep = evaluate("norm", manifest, sequence="condition")
    for r in rep["records"]:
        has = r["consecutive_dssim"] is not None
        assert has == (r["frame_idx"] > 0)


def test_condition_filter(manifest):
    rep = evaluate("identity", manifest, conditions=[9])
    assert {r["condition_id"] for r in rep["records"]} == {9}
    assert rep["metadata"]["conditions"] == [9]


def test_flicker_sequences_hop_conditions(manifest):
    rep = evaluate("identity", manifest, sequence="flicker", seed=0)
    assert rep["metadata"]["n_images"] == 3
    conds = [r["condition_id"] for r in rep["records"]]
    assert all(a != b for a, b in zip(conds, conds[1:]))


def test_missing_reference_rejected(manifest, tmp_path):
    from lumen.synth import DatasetManifest, DataError

    recs = [dict(r, is_reference=False) for r in manifest.records]
    broken = DatasetManifest(recs, manifest.seed, manifest.grid, manifest.root)
    with pytest.raises(DataError, match="missing reference"):
        evaluate("identity", broken)
    assert evaluate("identity", broken, references=False)["metadata"]["n_images"] == 36


def test_unknown_method():
    with pytest.raises(ValueError, match="identity"):
        resolve_method("sharpen")


def test_bad_sequence_mode(manifest):
    with pytest.raises(ValueError, match="sequence mode"):
        evaluate("identity", manifest, sequence="random")


def test_gains_positive_for_baselines(manifest):
    for name in ("norm", "ghe", "ahe"):
        rep = evaluate(name, manifest)
        assert all(r["gradient_gain"] > 0 for r in rep["records"])
