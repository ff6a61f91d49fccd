from __future__ import annotations

import numpy as np
import pytest

from vesnet import tensor as T
from vesnet.blocks import Conv2d, Module
from vesnet.network import (
    VARIANTS,
    ModelConfig,
    build_model,
    load_model,
    param_count,
    save_model,
)
from vesnet.tensor import Tensor
from vesnet.trainer import soft_dice_loss

TINY = dict(base_channels=1, multipliers=(2, 4, 6, 8))


def tiny_model(variant, seed=0):
    return build_model(ModelConfig(variant, **TINY), seed=seed)


def valid_frame(rng, channels=2, size=16):
    data = np.zeros((1, channels, size, size), dtype=np.float32)
    data[0, 0] = rng.random((size, size), dtype=np.float32)
    if channels == 2:
        data[0, 1] = rng.random((size, size), dtype=np.float32) * 2 - 1
    return Tensor(data)


# ---------------------------------------------------------------------------
# parameter budgets


def test_baseline_parameter_budget():
    count = param_count(build_model(ModelConfig("baseline")))
    assert abs(count - 103_000) / 103_000 < 0.10


def test_full_context_parameter_budget():
    count = param_count(build_model(ModelConfig("vesnet-sct+")))
    assert abs(count - 310_000) / 310_000 < 0.10


def test_variant_ladder_monotone():
    counts = {name: param_count(build_model(ModelConfig(name))) for name in VARIANTS}
    assert counts["baseline"] < counts["vesnet"] < counts["vesnet-s"] < counts["vesnet-sc"]
    assert counts["vesnet"] < counts["vesnet-t"] < counts["vesnet-t+"]
    assert counts["vesnet-t+"] < counts["vesnet-st+"] < counts["vesnet-sct+"]
    assert counts["vesnet-sct++"] == counts["vesnet-sct+"]  # wider window, same net


def test_param_count_primitives(rng):
    assert Module().param_count() == 0
    conv = Conv2d(rng, 2, 4, ksize=3, bias=True)
    assert conv.param_count() == 3 * 3 * 2 * 4 + 4


def test_same_seed_bit_identical():
    a = build_model(ModelConfig("vesnet-sct+", **TINY), seed=7)
    b = build_model(ModelConfig("vesnet-sct+", **TINY), seed=7)
    for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
        np.testing.assert_array_equal(pa.data, pb.data)
    c = build_model(ModelConfig("vesnet-sct+", **TINY), seed=8)
    assert any((pa.data != pc.data).any() for (_, pa), (_, pc) in zip(a.named_params(), c.named_params()))


# ---------------------------------------------------------------------------
# forward contract


@pytest.mark.parametrize("variant", ["baseline", "vesnet", "vesnet-sc", "vesnet-t", "vesnet-sct+"])
def test_forward_shape_and_range(rng, variant):
    model = tiny_model(variant)
    frame = valid_frame(rng, model.variant.input_channels)
    state = model.reset_state(16, 16)
    prob, state2 = model.forward(frame, state)
    assert prob.shape == (1, 1, 16, 16)
    assert (prob.data > 0).all() and (prob.data < 1).all()
    if model.variant.temporal == "none":
        assert state2.is_empty()
    else:
        assert not state2.is_empty()


def test_non_temporal_is_stateless(rng):
    model = tiny_model("vesnet")
    frame = valid_frame(rng)
    state = model.reset_state(16, 16)
    p1, _ = model.forward(frame, state)
    p2, _ = model.forward(frame, state)
    np.testing.assert_array_equal(p1.data, p2.data)


def test_temporal_state_affects_output(rng):
    model = tiny_model("vesnet-t+")
    f1 = valid_frame(rng)
    f2 = valid_frame(rng)
    state = model.reset_state(16, 16)
    _, s_after = model.forward(f1, state)
    out_fresh, _ = model.forward(f2, model.reset_state(16, 16))
    out_warm, _ = model.forward(f2, s_after)
    assert np.abs(out_fresh.data - out_warm.data).max() > 0


def test_temporal_frame_order_matters(rng):
    model = tiny_model("vesnet-t+")
    f1, f2 = valid_frame(rng), valid_frame(rng)

    def run(frames):
        state = model.reset_state(16, 16)
        out = None
        for f in frames:
            out, state = model.forward(f, state)
        return out.data

    assert np.abs(run([f1, f2]) - run([f2, f1])).max() > 0


def test_reset_state_shapes_and_zeros():
    model = tiny_model("vesnet-sct+")
    state = model.reset_state(64, 64)
    widths = model.config.widths
    assert set(state.hidden) == {0, 1, 2, 3}
    for lvl, side in zip(range(4), (64, 32, 16, 8)):
        h = state.hidden[lvl]
        assert h.shape == (1, widths[lvl], side, side)
        assert (h.data == 0).all()


def test_reset_state_reproduces_first_frame(rng):
    model = tiny_model("vesnet-sct+")
    frame = valid_frame(rng)
    p1, _ = model.forward(frame, model.reset_state(16, 16))
    p2, _ = model.forward(frame, model.reset_state(16, 16))
    np.testing.assert_array_equal(p1.data, p2.data)


def test_two_frame_unroll_matches_manual_composition(rng):
    model = tiny_model("vesnet-t+")
    frames = [valid_frame(rng, size=8) for _ in range(2)]

    def manual(frame, hidden):
        e = []
        x = frame
        for lvl in range(4):
            if lvl:
                x = T.pool2(x, "max")
            x = model.enc[lvl].forward(x, False)
            e.append(x)
        new_hidden = {}
        s3, h3 = model.skip_units[3].forward(e[3], h_prev=hidden.get(3))
        new_hidden[3] = h3
        d = s3
        for i, lvl in enumerate((2, 1, 0)):
            u = model.up[i].forward(T.nearest_up2(d), False)
            s, h = model.skip_units[lvl].forward(e[lvl], h_prev=hidden.get(lvl), g=d)
            new_hidden[lvl] = h
            d = model.dec[i].forward(T.concat_channels(s, u), False)
        return T.sigmoid(model.head.forward(d)), new_hidden

    state = model.reset_state(8, 8)
    hidden = dict(state.hidden)
    for f in frames:
        got, state = model.forward(f, state)
        want, hidden = manual(f, hidden)
        np.testing.assert_allclose(got.data, want.data, atol=1e-6)
        for lvl in range(4):
            np.testing.assert_allclose(state.hidden[lvl].data, hidden[lvl].data, atol=1e-6)


# ---------------------------------------------------------------------------
# validation errors


def test_wrong_channel_count_rejected(rng):
    model = tiny_model("baseline")
    with pytest.raises(T.ShapeError, match="channels"):
        model.forward(valid_frame(rng, channels=2), model.reset_state(16, 16))


def test_unnormalized_input_rejected(rng):
    model = tiny_model("vesnet")
    bad = valid_frame(rng)
    bad.data[0, 0, 0, 0] = 1.5
    with pytest.raises(ValueError, match="B-mode"):
        model.forward(bad, model.reset_state(16, 16))
    bad2 = valid_frame(rng)
    bad2.data[0, 1, 0, 0] = -1.5
    with pytest.raises(ValueError, match="Color"):
        model.forward(bad2, model.reset_state(16, 16))


def test_indivisible_dims_rejected(rng):
    model = tiny_model("vesnet")
    frame = Tensor(np.zeros((1, 2, 12, 16), dtype=np.float32))
    with pytest.raises(T.ShapeError, match="divisible"):
        model.forward(frame, model.reset_state(16, 16))


def test_unknown_variant_rejected():
    from vesnet.blocks import ConfigError

    with pytest.raises(ConfigError):
        build_model(ModelConfig("vesnet-xxl"))


# ---------------------------------------------------------------------------
# end-to-end gradient check


def test_full_net_gradient_fd(rng):
    model = build_model(ModelConfig("vesnet-sct+", base_channels=2, multipliers=(2, 3, 4, 5)), seed=0)
    target = np.zeros((8, 8), dtype=np.float32)
    target[2:5, 3:6] = 1.0
    data = np.zeros((1, 2, 8, 8))
    data[0, 0] = rng.random((8, 8))
    data[0, 1] = rng.random((8, 8)) * 2 - 1
    frame = Tensor(data)  # float64 input; params stay float32

    def f(t):
        prob, _ = model.forward(t, model.reset_state(8, 8), training=True)
        return soft_dice_loss(prob, target)

    assert T.grad_check(f, frame, step=1e-5) < 1e-2


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, rng):
    model = tiny_model("vesnet-sct+", seed=3)
    frame = valid_frame(rng)
    ref, _ = model.forward(frame, model.reset_state(16, 16))
    path = tmp_path / "model.vnet"
    save_model(path, model)
    loaded, header, leftover = load_model(path)
    assert header["variant"] == "vesnet-sct+"
    assert not leftover
    for (_, pa), (_, pb) in zip(model.named_params(), loaded.named_params()):
        np.testing.assert_array_equal(pa.data, pb.data)
    out, _ = loaded.forward(frame, loaded.reset_state(16, 16))
    np.testing.assert_array_equal(out.data, ref.data)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.vnet"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(IOError, match="magic"):
        load_model(p)
