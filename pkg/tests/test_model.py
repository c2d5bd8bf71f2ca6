import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcta.autograd import Tensor
from mcta.autograd.tensor import default_dtype
from mcta.errors import DimensionError, InvalidInputError, ParseError
from mcta.model import (
    AttentionMode,
    EmbeddingConfig,
    MCTANet,
    ModelConfig,
    desk_config,
    load_checkpoint,
    model_gradcheck,
    param_count,
    param_table,
    save_checkpoint,
    toy_config,
)
from oracles import attention_loop

MODES = list(AttentionMode)


def toy_net(mode=AttentionMode.MCTA, hidden=8, shared=True, seed=0):
    config = dataclasses.replace(toy_config(mode), hidden_channels=hidden, shared_attention_conv=shared)
    return MCTANet(config, rng=seed)


def embedded(rng, B, C, T):
    return Tensor(rng.normal(size=(B, C, T, 1)), dtype=np.float64)


# -- shapes ----------------------------------------------------------------------


@pytest.mark.parametrize("frames,expected", [(431, 52), (938, 115)])
def test_default_embedding_frames(frames, expected):
    assert EmbeddingConfig().output_frames(frames) == expected
    net = MCTANet(ModelConfig(), rng=0)
    x = np.random.default_rng(0).normal(size=(1, 3, frames, 128)).astype(np.float32)
    emb = net.embed(x)
    assert emb.shape == (1, 512, expected, 1)
    logits, out = net.forward_with_attention(x)
    assert logits.shape == (1, 50)
    assert out.weights.shape == (1, 512, expected, 1)
    assert out.hidden.shape == (1, 512)


def test_output_frames_monotone():
    emb = EmbeddingConfig()
    counts = [emb.output_frames(t) for t in range(1, 1200)]
    assert all(b >= a for a, b in zip(counts, counts[1:]))


def test_minimum_frames():
    emb = EmbeddingConfig()
    t = emb.min_frames()
    assert emb.output_frames(t) == 1 and emb.output_frames(t - 1) < 1
    net = MCTANet(desk_config(), rng=0)
    with pytest.raises(InvalidInputError, match="too short"):
        net.embed(np.zeros((1, 3, t - 1, 128), dtype=np.float32))
    assert net.embed(np.zeros((1, 3, t, 128), dtype=np.float32)).shape[2] == 1


def test_bad_input_shapes():
    net = MCTANet(toy_config(), rng=0)
    with pytest.raises(DimensionError):
        net.embed(np.zeros((1, 2, 16, 16)))
    with pytest.raises(DimensionError, match="mel axis"):
        net.embed(np.zeros((1, 3, 16, 20)))
    with pytest.raises(DimensionError):
        net.embed(np.zeros((3, 16, 16)))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ModelConfig(hidden_channels=0)
    with pytest.raises(InvalidInputError):
        ModelConfig(dropout_rate=1.0)
    with pytest.raises(InvalidInputError):
        ModelConfig(num_classes=1)
    with pytest.raises(InvalidInputError, match="mel bins"):
        ModelConfig(embedding=EmbeddingConfig(mel_bins=64))
    assert ModelConfig().with_mode("single").attention_mode is AttentionMode.SINGLE


# -- attention -------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.integers(1, 12), mode=st.sampled_from([AttentionMode.MCTA, AttentionMode.SINGLE]), scale=st.floats(0.1, 20))
def test_attention_weights_are_a_distribution_over_time(seed, T, mode, scale):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        net = toy_net(mode, seed=seed)
        x = Tensor(scale * rng.normal(size=(2, 8, T, 1)))
        A = net.attention_weights(x).data
        gate = 1 / (1 + np.exp(-net._branch_logits(x)[0].data))
    if mode is AttentionMode.SINGLE:
        gate = gate.mean(axis=1, keepdims=True)
    S = gate.sum(axis=2)
    assert np.all(A >= 0)
    # weights sum to S / (S + eps), which is 1 up to the stabilising epsilon
    np.testing.assert_allclose(A.sum(axis=2), S / (S + net.config.attention_eps), rtol=1e-10)
    assert np.all(A.sum(axis=2) <= 1.0)
    if mode is AttentionMode.SINGLE:
        # one shared weight vector for every channel
        np.testing.assert_allclose(A, np.broadcast_to(A[:, :1], A.shape), atol=0)


def test_no_attention_weights_are_ones():
    net = toy_net(AttentionMode.NONE)
    A = net.attention_weights(embedded(np.random.default_rng(0), 2, 8, 5)).data
    np.testing.assert_array_equal(A, 1.0)


@pytest.mark.parametrize("mode", MODES)
def test_attention_matches_loop_oracle(mode):
    rng = np.random.default_rng(1)
    hidden = 4 if mode is AttentionMode.SINGLE else 8
    T = 6 if mode is AttentionMode.SINGLE else 5
    with default_dtype(np.float64):
        net = toy_net(mode, hidden=hidden)
        xp = embedded(rng, 1, hidden, T)
        out = net.attend(xp)
    w = net.params["attend.conv.weight"].data[:, :, 0, 0]
    b = net.params["attend.conv.bias"].data
    A, z, XA, H = attention_loop(xp.data[0, :, :, 0], w, b, eps=net.config.attention_eps, mode=mode.value)
    A_out = np.broadcast_to(out.weights.data, out.linear.shape)
    np.testing.assert_allclose(A_out[0, :, :, 0], A, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.linear.data[0, :, :, 0], z, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.attended.data[0, :, :, 0], XA, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.hidden_pre.data[0], H, rtol=1e-10, atol=1e-12)


def test_no_attention_is_time_sum():
    with default_dtype(np.float64):
        net = toy_net(AttentionMode.NONE)
        out = net.attend(embedded(np.random.default_rng(2), 3, 8, 7))
    np.testing.assert_allclose(out.hidden_pre.data, out.linear.data.sum(axis=(2, 3)), rtol=1e-12)


@pytest.mark.parametrize("mode", [AttentionMode.MCTA, AttentionMode.SINGLE])
def test_constant_logits_give_uniform_weights(mode):
    with default_dtype(np.float64):
        net = toy_net(mode)
        net.params["attend.conv.weight"].data[...] = 0.0
        net.params["attend.conv.bias"].data[...] = 0.0
        T = 7
        A = net.attention_weights(embedded(np.random.default_rng(3), 2, 8, T)).data
    np.testing.assert_allclose(A, 1.0 / T, rtol=1e-7)


@pytest.mark.parametrize("mode", MODES)
def test_time_permutation(mode):
    rng = np.random.default_rng(4)
    perm = rng.permutation(9)
    with default_dtype(np.float64):
        net = toy_net(mode)
        x = embedded(rng, 2, 8, 9)
        a = net.attend(x)
        b = net.attend(Tensor(x.data[:, :, perm]))
    np.testing.assert_allclose(b.hidden_pre.data, a.hidden_pre.data, rtol=1e-10)
    weights = np.broadcast_to(a.weights.data, a.linear.shape)
    np.testing.assert_allclose(np.broadcast_to(b.weights.data, b.linear.shape), weights[:, :, perm], rtol=1e-10)


@pytest.mark.parametrize("mode", MODES)
def test_scaling_linear_branch_scales_hidden(mode):
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        net = toy_net(mode, shared=False)
        x = embedded(rng, 2, 8, 6)
        before = net.attend(x).hidden_pre.data.copy()
        alpha = np.ones(8)
        alpha[2], alpha[5] = 3.0, -0.5
        net.params["attend.conv_lin.weight"].data[...] *= alpha[:, None, None, None]
        net.params["attend.conv_lin.bias"].data[...] *= alpha
        after = net.attend(x).hidden_pre.data
    np.testing.assert_allclose(after, before * alpha, rtol=1e-10)


# -- parameters ------------------------------------------------------------------


def test_default_parameter_count():
    assert param_count(ModelConfig()) == 1_421_218
    head = [n for name, _, n in param_table(ModelConfig()) if name.startswith("head.")]
    assert sum(head) == 25_650
    assert MCTANet(ModelConfig(), rng=0).num_parameters() == 1_421_218


@pytest.mark.parametrize("mode", MODES)
def test_parameter_count_is_mode_independent(mode):
    assert param_count(ModelConfig(attention_mode=mode)) == 1_421_218
    assert param_count(desk_config(8, mode)) == param_count(desk_config(8))


def test_unshared_attention_adds_one_pointwise_conv():
    shared, split = ModelConfig(), ModelConfig(shared_attention_conv=False)
    assert param_count(split) - param_count(shared) == 512 * 512 + 512


def test_trainable_parameters_skip_unused_gate_conv():
    net = toy_net(AttentionMode.NONE, shared=False)
    names = {t.name for t in net.trainable_parameters()}
    assert "attend.conv_att.weight" not in names and "attend.conv_lin.weight" in names
    assert len(toy_net(AttentionMode.MCTA, shared=False).trainable_parameters()) == len(net.parameters())


def test_init_is_seeded():
    a, b, c = MCTANet(toy_config(), rng=3), MCTANet(toy_config(), rng=3), MCTANet(toy_config(), rng=4)
    for (_, ta), (_, tb), (_, tc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert ta.data.tobytes() == tb.data.tobytes()
    assert any(ta.data.tobytes() != tc.data.tobytes() for (_, ta), (_, tc) in zip(a.named_parameters(), c.named_parameters()) if ta.name and "bn" not in ta.name)


# -- forward behaviour -------------------------------------------------------------


def test_eval_forward_is_deterministic():
    net = MCTANet(toy_config(), rng=0)
    x = np.random.default_rng(6).normal(size=(4, 3, 16, 16)).astype(np.float32)
    assert net(x).data.tobytes() == net(x).data.tobytes()


def test_eval_does_not_touch_running_stats():
    net = MCTANet(toy_config(), rng=0)
    before = [arr.copy() for _, arr in net.state_arrays()]
    net(np.random.default_rng(7).normal(size=(2, 3, 16, 16)))
    for a, (_, b) in zip(before, net.state_arrays()):
        np.testing.assert_array_equal(a, b)


def test_training_forward_updates_running_stats():
    net = MCTANet(toy_config(), rng=0)
    net.forward(np.random.default_rng(8).normal(size=(4, 3, 16, 16)), training=True, rng=np.random.default_rng(0))
    assert not np.all(net.bn["attend.bn"].running_mean == 0)


@pytest.mark.parametrize("mode", MODES)
def test_model_gradcheck(mode):
    errs = model_gradcheck(toy_config(mode), points=10)
    assert max(errs.values()) < 1e-3, errs


def test_model_gradcheck_unshared():
    config = dataclasses.replace(toy_config(AttentionMode.MCTA), shared_attention_conv=False)
    errs = model_gradcheck(config, points=10)
    assert "attend.conv_att.weight" in errs
    assert max(errs.values()) < 1e-3, errs


# -- checkpoints -----------------------------------------------------------------


@pytest.mark.parametrize("mode", MODES)
def test_checkpoint_round_trip(tmp_path, mode):
    net = MCTANet(toy_config(mode), rng=5)
    x = np.random.default_rng(9).normal(size=(3, 3, 16, 16)).astype(np.float32)
    net.forward(x, training=True, rng=np.random.default_rng(0))
    save_checkpoint(net, tmp_path / "m.ckpt", extra={"fold": "3"})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"fold": "3"}
    assert loaded.config == net.config
    for (na, a), (nb, b) in zip(net.state_arrays(), loaded.state_arrays()):
        assert na == nb and a.tobytes() == b.tobytes()
    assert loaded(x).data.tobytes() == net(x).data.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "a.ckpt").write_bytes(b"hello\n")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "a.ckpt")
    net = MCTANet(toy_config(), rng=0)
    save_checkpoint(net, tmp_path / "b.ckpt")
    raw = (tmp_path / "b.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw.replace(b"MCTA-CHECKPOINT 1", b"MCTA-CHECKPOINT 9", 1))
    with pytest.raises(ParseError, match="version"):
        load_checkpoint(tmp_path / "c.ckpt")
    (tmp_path / "d.ckpt").write_bytes(raw.replace(b"head.bias", b"head.bogus", 1))
    with pytest.raises(ParseError, match="manifest"):
        load_checkpoint(tmp_path / "d.ckpt")
