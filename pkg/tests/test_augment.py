import math

import numpy as np
import pytest

from mcta.augment import (
    AugmentationError,
    AugmentSpec,
    KINDS,
    add_noise,
    augment_manifest,
    make_variants,
    pitch_shift,
    time_shift,
    variant_id,
    write_augmented,
)
from mcta.data import Manifest, ManifestRow, load_manifest, load_wav, save_manifest, write_wav
from mcta.errors import InvalidInputError


def peak_hz(x, sr):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    k = int(np.argmax(spec))
    # parabolic interpolation around the peak bin
    a, b, c = np.log(spec[k - 1 : k + 2])
    k = k + 0.5 * (a - c) / (a - 2 * b + c)
    return k * sr / len(x)


def tiny_dataset(root, n=10, folds=(1, 2, 3, 4, 5), seconds=0.05, sr=8000):
    rng = np.random.default_rng(0)
    rows = []
    for i in range(n):
        cid = f"clip{i:04d}"
        write_wav(root / "audio" / f"{cid}.wav", 0.3 * rng.uniform(-1, 1, int(seconds * sr)), sr)
        rows.append(ManifestRow(cid, f"audio/{cid}.wav", i % 3, folds[i % len(folds)], "original", cid))
    manifest = Manifest(rows, root)
    save_manifest(manifest, root / "manifest.csv")
    return load_manifest(root / "manifest.csv")


# -- time shift ------------------------------------------------------------------


def test_time_shift_zero_is_identity():
    x = np.random.default_rng(0).normal(size=100)
    np.testing.assert_array_equal(time_shift(x, 0.0, 22_050), x)


def test_time_shift_small_example():
    np.testing.assert_array_equal(time_shift(np.array([1.0, 2, 3, 4]), 2.0, 1), [0, 0, 1, 2])


def test_time_shift_slices():
    x = np.random.default_rng(1).normal(size=22_050)
    y = time_shift(x, 100 / 22_050, 22_050)
    assert y.shape == x.shape
    np.testing.assert_array_equal(y[100:], x[:-100])
    np.testing.assert_array_equal(y[:100], 0)


def test_time_shift_longer_than_clip():
    assert np.all(time_shift(np.ones(10), 5.0, 10) == 0)


def test_time_shift_rejects_advance():
    with pytest.raises(InvalidInputError):
        time_shift(np.ones(10), -0.1, 10)


# -- pitch shift -----------------------------------------------------------------


def test_pitch_shift_zero_is_identity():
    sr = 22_050
    x = 0.5 * np.sin(2 * np.pi * 440 * np.arange(sr) / sr)
    y = pitch_shift(x, 0.0, sr)
    assert np.sqrt(np.mean((x - y) ** 2)) < 1e-3


@pytest.mark.parametrize("semitones,target", [(12, 880.0), (-12, 220.0), (4, 440 * 2 ** (4 / 12)), (-4, 440 * 2 ** (-4 / 12))])
def test_pitch_shift_moves_peak(semitones, target):
    sr = 22_050
    x = 0.5 * np.sin(2 * np.pi * 440 * np.arange(2 * sr) / sr)
    y = pitch_shift(x, semitones, sr)
    assert y.shape == x.shape
    assert abs(peak_hz(y, sr) - target) <= 0.01 * target


@pytest.mark.parametrize("n", [1, 100, 1023, 5000])
def test_pitch_shift_preserves_length(n):
    x = np.random.default_rng(n).normal(size=n)
    assert pitch_shift(x, 2.7, 8000).shape == (n,)


# -- noise -----------------------------------------------------------------------


def test_noise_factor_zero_identity():
    x = np.random.default_rng(2).normal(size=50)
    np.testing.assert_array_equal(add_noise(x, 0.0, np.random.default_rng(0)), x)


def test_noise_statistics():
    n = 100_000
    x = np.zeros(n)
    d = add_noise(x, 0.01, np.random.default_rng(3)) - x
    # standard error of a sample std is about sigma / sqrt(2n)
    assert abs(d.std() - 0.01) < 3 * 0.01 / math.sqrt(2 * n)
    assert abs(d.mean()) < 3 * 0.01 / math.sqrt(n)


def test_noise_rejects_negative_factor():
    with pytest.raises(InvalidInputError):
        add_noise(np.zeros(3), -1.0, np.random.default_rng(0))


# -- spec ------------------------------------------------------------------------


def test_augment_spec_defaults_and_validation():
    spec = AugmentSpec()
    assert (spec.max_shift_seconds, spec.pitch_low, spec.pitch_high, spec.noise_factor) == (2.5, -4.0, 4.0, 0.01)
    with pytest.raises(InvalidInputError):
        AugmentSpec(max_shift_seconds=-1)
    with pytest.raises(InvalidInputError):
        AugmentSpec(pitch_low=2, pitch_high=1)
    with pytest.raises(InvalidInputError):
        AugmentSpec(noise_factor=-0.1)


def test_variants_keep_length_and_are_seeded():
    x = np.random.default_rng(4).normal(scale=0.1, size=4000)
    a = make_variants(x, 8000, "clip", AugmentSpec(seed=1))
    b = make_variants(x, 8000, "clip", AugmentSpec(seed=1))
    c = make_variants(x, 8000, "clip", AugmentSpec(seed=2))
    assert set(a) == set(KINDS)
    for kind in KINDS:
        assert a[kind].shape == x.shape
        assert a[kind].tobytes() == b[kind].tobytes()
    assert any(a[k].tobytes() != c[k].tobytes() for k in KINDS)


def test_variant_ids_are_deterministic():
    assert variant_id("dog-1", "noise", 3) == variant_id("dog-1", "noise", 3)
    assert variant_id("dog-1", "noise", 3) != variant_id("dog-1", "noise", 4)
    assert variant_id("dog-1", "noise", 3) != variant_id("dog-1", "pitch_shift", 3)


# -- manifests -------------------------------------------------------------------


def test_augment_manifest_quadruples(tmp_path):
    manifest = tiny_dataset(tmp_path / "src", n=10)
    out = augment_manifest(manifest, AugmentSpec(seed=0), tmp_path / "aug")
    assert len(out) == 40
    kinds = [r.variant_kind for r in out]
    for kind in KINDS:
        assert kinds.count(kind) == 10
    by_id = out.by_id()
    for row in out:
        src = by_id[row.source_id]
        assert src.is_original and src.fold == row.fold and src.label == row.label
        clip, ref = load_wav(out.resolve(row)), load_wav(out.resolve(src))
        assert clip.samples.shape == ref.samples.shape and clip.sample_rate == ref.sample_rate


def test_augment_empty_manifest(tmp_path):
    out = augment_manifest(Manifest([], tmp_path), AugmentSpec(), tmp_path / "aug")
    assert len(out) == 0


def test_augment_is_bitwise_reproducible(tmp_path):
    manifest = tiny_dataset(tmp_path / "src", n=4)
    a = augment_manifest(manifest, AugmentSpec(seed=5), tmp_path / "a")
    b = augment_manifest(manifest, AugmentSpec(seed=5), tmp_path / "b")
    for ra, rb in zip(a, b):
        assert ra.id == rb.id
        assert a.resolve(ra).read_bytes() == b.resolve(rb).read_bytes()


def test_augment_only_training_folds(tmp_path):
    manifest = tiny_dataset(tmp_path / "src", n=10)
    out = augment_manifest(manifest, AugmentSpec(), tmp_path / "aug", folds=[2, 3, 4, 5])
    added = {r.id for r in out} - {r.id for r in manifest}
    assert len(added) == 3 * 8
    assert all(out.by_id()[i].fold != 1 for i in added)


def test_augment_parallel_matches_serial(tmp_path):
    manifest = tiny_dataset(tmp_path / "src", n=4)
    a = augment_manifest(manifest, AugmentSpec(seed=9), tmp_path / "a", jobs=1)
    b = augment_manifest(manifest, AugmentSpec(seed=9), tmp_path / "b", jobs=2)
    assert [r.id for r in a] == [r.id for r in b]
    for ra, rb in zip(a, b):
        assert a.resolve(ra).read_bytes() == b.resolve(rb).read_bytes()


def test_augment_reports_unreadable_sources(tmp_path):
    manifest = tiny_dataset(tmp_path / "src", n=4)
    (tmp_path / "src" / "audio" / "clip0001.wav").write_bytes(b"not a wav")
    (tmp_path / "src" / "audio" / "clip0003.wav").unlink()
    with pytest.raises(AugmentationError) as info:
        augment_manifest(manifest, AugmentSpec(), tmp_path / "aug")
    assert sorted(cid for cid, _ in info.value.failures) == ["clip0001", "clip0003"]


def test_write_augmented_manifest_loads(tmp_path):
    manifest = tiny_dataset(tmp_path / "src", n=3)
    write_augmented(manifest, AugmentSpec(), tmp_path / "aug")
    loaded = load_manifest(tmp_path / "aug" / "augmented.csv")
    assert len(loaded) == 12
