"""End-to-end acceptance checks, one test per criterion.

The conftest summary prints one PASS/FAIL line per criterion.  Training
criteria use the narrow desk network (``desk_config``) so that they finish on
one CPU core; everything else uses the default configuration.
"""

import math
import time

import numpy as np
import pytest

from mcta.augment import AugmentSpec, add_noise, augment_manifest, pitch_shift
from mcta.autograd import Tensor, ops
from mcta.autograd.gradcheck import DEFAULT_STEP, run_op_checks
from mcta.autograd.tensor import default_dtype
from mcta.data import Manifest, ManifestRow, SynthSpec, synth_dataset, write_wav
from mcta.features import AudioClip, deltas, make_input, stft_power
from mcta.model import AttentionMode, MCTANet, ModelConfig, desk_config, model_gradcheck, param_count, toy_config
from mcta.train import (
    TrainConfig,
    ablation,
    attention_diversity,
    evaluate,
    load_feature_set,
    lr_update,
    split_fold,
    train_fold,
    write_json,
)
from oracles import attention_loop, conv2d_loop, linear_loop, maxpool_loop

MODES = list(AttentionMode)


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    """The 320-clip, 8-class synthetic dataset as a feature set."""
    root = tmp_path_factory.mktemp("synth")
    manifest = synth_dataset(SynthSpec(seed=0), root)
    return load_feature_set(manifest, root / "cache")


def test_criterion_01_gradients():
    start = time.perf_counter()
    assert DEFAULT_STEP == 1e-5
    ops_err = run_op_checks(points=20)
    model_err = {mode.value: max(model_gradcheck(toy_config(mode), points=20).values()) for mode in MODES}
    elapsed = time.perf_counter() - start
    print(f"op errors {ops_err}\nmodel errors {model_err}\n{elapsed:.1f}s")
    assert max(ops_err.values()) < 1e-4
    assert max(model_err.values()) < 1e-3
    assert elapsed < 120


def test_criterion_02_shapes():
    net = MCTANet(ModelConfig(), rng=0)
    x = np.random.default_rng(0).normal(size=(1, 3, 431, 128)).astype(np.float32)
    embedded = net.embed(x)
    logits, out = net.forward_with_attention(x)
    assert embedded.shape == (1, 512, 52, 1)
    assert out.hidden.shape == (1, 512)
    assert logits.shape == (1, 50)


def test_criterion_03_attention_normalization():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    nets = {mode: MCTANet(ModelConfig(attention_mode=mode), rng=1) for mode in MODES}
    for _ in range(10):
        # ten batches of ten random embedded maps, C' = 512, T' = 52
        embedded = Tensor(rng.normal(scale=rng.uniform(0.1, 3.0), size=(10, 512, 52, 1)))
        A = nets[AttentionMode.MCTA].attention_weights(embedded).numpy()
        assert np.max(np.abs(A.sum(axis=2) - 1.0)) < 1e-6
        single = nets[AttentionMode.SINGLE].attention_weights(embedded).numpy()
        single = np.broadcast_to(single, A.shape)
        assert np.max(np.abs(single.sum(axis=2) - 1.0)) < 1e-6
        assert np.all(single == single[:, :1])
        out = nets[AttentionMode.NONE].attend(embedded)
        np.testing.assert_array_equal(out.hidden_pre.numpy(), out.linear.numpy().sum(axis=(2, 3)))
    assert time.perf_counter() - start < 60


def test_criterion_04_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    with default_dtype(np.float64):
        for mode in MODES:
            config = ModelConfig(hidden_channels=8, attention_mode=mode, embedding=toy_config().embedding)
            for trial in range(5):
                net = MCTANet(config, rng=trial)
                xp = Tensor(rng.normal(size=(1, 8, 5, 1)))
                out = net.attend(xp)
                w = net.params["attend.conv.weight"].numpy()[:, :, 0, 0]
                b = net.params["attend.conv.bias"].numpy()
                A, z, XA, H = attention_loop(xp.numpy()[0, :, :, 0], w, b, net.config.attention_eps, mode.value)
                A_out = np.broadcast_to(out.weights.numpy(), out.linear.shape)[0, :, :, 0]
                assert np.max(np.abs(A_out - A)) < 1e-6
                assert np.max(np.abs(out.attended.numpy()[0, :, :, 0] - XA)) < 1e-6
                assert np.max(np.abs(out.hidden_pre.numpy()[0] - H)) < 1e-6

        x = rng.normal(size=(2, 3, 9, 8))
        w, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        for stride, padding in [((1, 1), (1, 1)), ((2, 1), (0, 0)), ((1, 2), (1, 0))]:
            got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).numpy()
            assert np.max(np.abs(got - conv2d_loop(x, w, b, stride, padding))) < 1e-6
        got = ops.maxpool2d(Tensor(x), (2, 4)).numpy()
        assert np.max(np.abs(got - maxpool_loop(x, (2, 4), (2, 4))[0])) < 1e-6
        v, lw, lb = rng.normal(size=(5, 7)), rng.normal(size=(3, 7)), rng.normal(size=3)
        got = ops.linear(Tensor(v), Tensor(lw), Tensor(lb)).numpy()
        assert np.max(np.abs(got - linear_loop(v, lw, lb))) < 1e-6
    assert time.perf_counter() - start < 60


def test_criterion_05_parameter_budget():
    counts = {mode.value: param_count(ModelConfig(attention_mode=mode)) for mode in MODES}
    built = MCTANet(ModelConfig(), rng=0).num_parameters()
    print(counts)
    assert len(set(counts.values())) == 1
    assert counts["mcta"] == built
    assert abs(built - 1.47e6) <= 0.15 * 1.47e6


def test_criterion_06_features():
    start = time.perf_counter()
    sr, n = 44_100, 220_500
    feats = make_input(AudioClip(np.random.default_rng(6).uniform(-1, 1, n), sr))
    assert feats.data.shape == (3, 431, 128)

    tone = np.sin(2 * np.pi * 1000 * np.arange(n) / sr)
    power = stft_power(tone)
    centre = round(1000 * 1024 / sr)
    band = power[:, centre - 2 : centre + 3].sum(axis=1) / power.sum(axis=1)
    # every frame except the first, whose centred window straddles the
    # mirrored signal start, plus the total over all frames
    print(f"band fraction: frame 0 {band[0]:.4f}, others min {band[1:].min():.4f}")
    assert band[1:].min() >= 0.95
    assert power[:, centre - 2 : centre + 3].sum() / power.sum() >= 0.95

    const = np.tile(np.random.default_rng(7).normal(size=128), (50, 1))
    assert np.all(deltas(const) == 0) and np.all(deltas(const, order=2) == 0)
    assert time.perf_counter() - start < 60


def test_criterion_07_augmentation(tmp_path):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    rows = []
    for i in range(2000):
        cid = f"clip{i:05d}"
        write_wav(tmp_path / "src" / f"{cid}.wav", 0.3 * rng.uniform(-1, 1, 400), 8000)
        rows.append(ManifestRow(cid, f"src/{cid}.wav", i % 10, 1 + i % 5, "original", cid))
    expanded = augment_manifest(Manifest(rows, tmp_path), AugmentSpec(seed=0), tmp_path / "aug")
    assert len(expanded) == 8000

    sr = 22_050
    sine = 0.5 * np.sin(2 * np.pi * 440 * np.arange(2 * sr) / sr)
    shifted = pitch_shift(sine, 12.0, sr)
    spec = np.abs(np.fft.rfft(shifted * np.hanning(len(shifted))))
    k = int(np.argmax(spec))
    a, b, c = np.log(spec[k - 1 : k + 2])
    peak = (k + 0.5 * (a - c) / (a - 2 * b + c)) * sr / len(shifted)
    print(f"shifted peak {peak:.2f} Hz")
    assert abs(peak - 880) <= 0.01 * 880

    m = 100_000
    noise = add_noise(np.zeros(m), 0.01, np.random.default_rng(0))
    sigma = 0.01 / math.sqrt(2 * m)
    assert abs(noise.std() - 0.01) < 3 * sigma
    assert time.perf_counter() - start < 300


def test_criterion_08_training(synth):
    start = time.perf_counter()
    subset = synth.subset(np.sort(np.random.default_rng(8).choice(len(synth), 50, replace=False)))
    config = TrainConfig(epochs=50, batch_size=50, seed=0)
    a = train_fold(subset, subset, desk_config(8), config, seed=0)
    b = train_fold(subset, subset, desk_config(8), config, seed=0)
    print(f"train accuracy {a.accuracy:.4f}, final loss {a.losses[-1]:.4f}, lrs {sorted(set(a.lrs), reverse=True)}")
    assert a.accuracy >= 0.99

    assert a.lrs[0] == config.lr_init
    for e in range(1, len(a.lrs)):
        assert a.lrs[e] == lr_update(a.losses[:e], a.lrs[e - 1], config.lr_decay)

    assert a.losses == b.losses and a.lrs == b.lrs and a.batch_digest == b.batch_digest
    for (_, x), (_, y) in zip(a.model.state_arrays(), b.model.state_arrays()):
        assert x.tobytes() == y.tobytes()
    assert time.perf_counter() - start < 600


def test_criterion_09_ablation(synth, tmp_path):
    start = time.perf_counter()
    report = ablation(synth, desk_config(8), TrainConfig(epochs=15, repeats=3, seed=0))
    elapsed = time.perf_counter() - start
    write_json(report.to_dict(), tmp_path / "ablation.json")
    means = {row["mode"]: row["mean_accuracy"] for row in report.table()}
    for row in report.table():
        print(f"{row['mode']:>7}: {100 * row['mean_accuracy']:.2f} +/- {100 * row['std_accuracy']:.2f}%  params={row['param_count']}")
    print(f"{elapsed / 60:.1f} min")
    assert report.batch_sequences_match()
    assert all(len(r.runs) == 15 for r in report.reports.values())
    assert means["mcta"] >= means["single"] - 0.01
    assert means["single"] >= means["none"] - 0.01
    assert elapsed <= 2 * 3600


def test_criterion_10_attention_diversity(synth):
    start = time.perf_counter()
    train, val = split_fold(synth, 1)
    res = train_fold(train, val, desk_config(8), TrainConfig(epochs=15, seed=0), seed=[0, 1])
    cos = attention_diversity(res.model, val, channels=5, seed=0)
    frac = float(np.mean(cos < 0.99))
    print(f"val accuracy {res.accuracy:.4f}; cosine median {np.median(cos):.4f}; fraction below 0.99 {frac:.3f}")
    assert len(cos) == len(val) == 64
    assert frac >= 0.9
    assert time.perf_counter() - start < 300
