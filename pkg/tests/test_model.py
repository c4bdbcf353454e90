import numpy as np
import pytest

from lumen import tensor as T
from lumen.model import Enhancer, ShapeError
from lumen.synth import ImageFrame
from lumen.tensor import Tensor, gradcheck


def test_output_shape_and_range():
    m = Enhancer(seed=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 48, 64)).astype(np.float32))
    out, state = m(x, train=True)
    assert out.shape == (2, 1, 48, 64) and state is None
    assert out.data.min() > 0 and out.data.max() < 1


def test_bottleneck_shape():
    assert Enhancer(widths=(16, 32, 64)).bottleneck_shape(48, 64) == (64, 6, 8)


def test_indivisible_input_rejected():
    with pytest.raises(ShapeError, match="divisible by 8"):
        Enhancer().forward(Tensor(np.zeros((1, 1, 50, 64), np.float32)))


def test_state_for_nonrecurrent_rejected():
    m = Enhancer(widths=(2, 2, 2))
    s = Enhancer(widths=(2, 2, 2), recurrent=True).zero_state(1)
    with pytest.raises(ShapeError, match="does not take a state"):
        m.forward(Tensor(np.zeros((1, 1, 8, 8), np.float32)), s)


def test_recurrent_state_batch_mismatch():
    m = Enhancer(widths=(2, 2, 4), recurrent=True)
    with pytest.raises(ShapeError, match="recurrent state"):
        m.forward(Tensor(np.zeros((2, 1, 8, 8), np.float32)), m.zero_state(3))


def test_same_seed_same_weights():
    assert Enhancer(seed=3).digest() == Enhancer(seed=3).digest()
    assert Enhancer(seed=3).digest() != Enhancer(seed=4).digest()


def test_parameter_names():
    names = list(Enhancer(recurrent=True).parameters())
    assert names[0] == "enc0.conv.weight" and "merge.weight" in names
    assert "lstm1.w_h" in names
    assert len(names) == 6 * 4 + 2 + 2 * 3


def test_merge_weight_is_one_by_one_over_two_channels():
    assert Enhancer().parameters()["merge.weight"].shape == (1, 2, 1, 1)


def test_with_recurrent_keeps_cnn_weights():
    m = Enhancer(seed=5)
    r = m.with_recurrent()
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(r.state_dict()[k], v)
    assert r.recurrent and not m.recurrent


def test_recurrent_state_changes_output():
    m = Enhancer(widths=(4, 4, 8), recurrent=True, seed=1)
    for layer in m.lstm:
        layer.bias.data[:] = 0.5
    x = np.random.default_rng(2).uniform(size=(16, 16))
    a, s = m.enhance(x)
    b, _ = m.enhance(x, s)
    assert not np.array_equal(a, b)
    again, _ = m.enhance(x)
    np.testing.assert_array_equal(a, again)


def test_enhance_keeps_frame_type():
    m = Enhancer(widths=(2, 2, 2))
    f = ImageFrame(np.full((8, 8), 0.5), scene_id=1, frame_idx=3, condition_id=2)
    out, state = m.enhance(f)
    assert isinstance(out, ImageFrame) and out.frame_idx == 3 and state is None


def test_enhance_sequence_is_deterministic():
    m = Enhancer(widths=(2, 2, 4), recurrent=True)
    frames = list(np.random.default_rng(3).uniform(size=(3, 8, 8)))
    a = m.enhance_sequence(frames)
    b = m.enhance_sequence(frames)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_infer_mode_does_not_touch_running_stats():
    m = Enhancer(widths=(2, 2, 2))
    before = {k: v.copy() for k, v in m.buffers().items()}
    m.enhance(np.random.default_rng(0).uniform(size=(8, 8)))
    for k, v in m.buffers().items():
        np.testing.assert_array_equal(v, before[k])


def test_load_state_dict_shape_mismatch():
    m = Enhancer(widths=(2, 2, 2))
    state = Enhancer(widths=(2, 2, 4)).state_dict()
    with pytest.raises(ShapeError):
        m.load_state_dict(state)


@pytest.mark.parametrize("recurrent", [False, True])
def test_full_enhancer_gradcheck(recurrent):
    m = Enhancer(widths=(2, 3, 4), recurrent=recurrent, seed=7).astype(np.float64)
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(size=(2, 1, 16, 16)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 1, 16, 16)))
    params = list(m.parameters().values())

    def f():
        out, _ = m(x, train=True)
        return T.sum_(out * w)

    # sample a subset of coordinates per tensor to keep the check fast
    gradcheck(f, [x] + params, max_elements=6)
