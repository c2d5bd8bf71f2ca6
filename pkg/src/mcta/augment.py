"""Offline training-set expansion: delay, pitch shift and additive noise.

Each original clip yields exactly one variant of each kind, written to disk
next to the source data, so an N-clip manifest grows to 4N rows.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from mcta.data import Manifest, ManifestRow, load_clip, save_manifest, stable_hash, write_wav
from mcta.errors import InvalidInputError, MctaError
from mcta.features import hann, stft

log = logging.getLogger(__name__)

KINDS = ("time_shift", "pitch_shift", "noise")
PV_N_FFT = 1024
PV_HOP = 256


@dataclass(frozen=True)
class AugmentSpec:
    max_shift_seconds: float = 2.5
    pitch_low: float = -4.0
    pitch_high: float = 4.0
    noise_factor: float = 0.01
    seed: int = 0
    integer_pitch: bool = False

    def __post_init__(self):
        if self.max_shift_seconds < 0:
            raise InvalidInputError("max_shift_seconds must be >= 0")
        if self.pitch_low > self.pitch_high:
            raise InvalidInputError("pitch range is empty")
        if self.noise_factor < 0:
            raise InvalidInputError("noise_factor must be >= 0")


class AugmentationError(MctaError):
    def __init__(self, failures: list[tuple[str, str]]):
        self.failures = failures
        lines = "\n".join(f"  {cid}: {msg}" for cid, msg in failures)
        super().__init__(f"augmentation failed for {len(failures)} clip(s):\n{lines}")


def time_shift(samples: np.ndarray, shift_seconds: float, sample_rate: int) -> np.ndarray:
    """Delay by ``round(shift_seconds * sample_rate)`` samples, keeping the length."""
    if shift_seconds < 0:
        raise InvalidInputError(f"time shifts are delays only; got {shift_seconds} s")
    samples = np.asarray(samples)
    d = int(round(shift_seconds * sample_rate))
    out = np.zeros_like(samples)
    if d < samples.size:
        out[d:] = samples[: samples.size - d]
    return out


def istft(spec: np.ndarray, hop: int, length: int) -> np.ndarray:
    """Inverse of :func:`mcta.features.stft` (``frames x bins``), by weighted overlap-add."""
    n_fft = 2 * (spec.shape[1] - 1)
    window = hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (frames.shape[0] - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for t, frame in enumerate(frames):
        y[t * hop : t * hop + n_fft] += frame
        norm[t * hop : t * hop + n_fft] += window**2
    nz = norm > 1e-10
    y[nz] /= norm[nz]
    y = y[n_fft // 2 :]
    if y.size >= length:
        return y[:length]
    return np.pad(y, (0, length - y.size))


def phase_vocoder(spec: np.ndarray, rate: float, hop: int) -> np.ndarray:
    """Resynthesise ``spec`` (``frames x bins``) at ``rate`` frames per output frame.

    ``rate < 1`` lengthens the signal without changing its pitch.
    """
    frames, bins = spec.shape
    n_fft = 2 * (bins - 1)
    steps = np.arange(0, frames, rate)
    padded = np.concatenate([spec, np.zeros((2, bins), dtype=spec.dtype)])
    lo = steps.astype(int)
    alpha = (steps - lo)[:, None]
    left, right = padded[lo], padded[lo + 1]
    mag = (1 - alpha) * np.abs(left) + alpha * np.abs(right)
    expected = 2 * np.pi * hop * np.arange(bins) / n_fft
    dphase = np.angle(right) - np.angle(left) - expected
    dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
    advance = expected + dphase
    phase = np.angle(spec[0]) + np.concatenate([np.zeros((1, bins)), np.cumsum(advance[:-1], axis=0)])
    return mag * np.exp(1j * phase)


def pitch_shift(samples: np.ndarray, semitones: float, sample_rate: int, n_fft: int = PV_N_FFT, hop: int = PV_HOP) -> np.ndarray:
    """Shift pitch by ``semitones`` while keeping duration.

    The signal is first time-stretched by ``2 ** (semitones / 12)`` with a
    phase vocoder, then resampled back to the original number of samples.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    stretch = 2.0 ** (semitones / 12.0)
    stretched_len = max(1, int(round(n * stretch)))
    spec = stft(samples, n_fft, hop)
    stretched = istft(phase_vocoder(spec, 1.0 / stretch, hop), hop, stretched_len)
    if stretched_len == n:
        return stretched
    return signal.resample(stretched, n)


def add_noise(samples: np.ndarray, factor: float, rng: np.random.Generator) -> np.ndarray:
    if factor < 0:
        raise InvalidInputError(f"noise factor must be >= 0, got {factor}")
    samples = np.asarray(samples, dtype=np.float64)
    if factor == 0:
        return samples.copy()
    return samples + factor * rng.standard_normal(samples.size)


def variant_id(source_id: str, kind: str, seed: int) -> str:
    return f"{source_id}--{kind}-s{seed}"


def _clip_rng(spec: AugmentSpec, source_id: str, kind: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stable_hash(source_id), KINDS.index(kind)])


def make_variants(samples: np.ndarray, sample_rate: int, source_id: str, spec: AugmentSpec) -> dict[str, np.ndarray]:
    """The three augmented copies of one clip, keyed by variant kind."""
    rng = _clip_rng(spec, source_id, "time_shift")
    shifted = time_shift(samples, rng.uniform(0, spec.max_shift_seconds), sample_rate)

    rng = _clip_rng(spec, source_id, "pitch_shift")
    if spec.integer_pitch:
        semitones = float(rng.integers(int(np.ceil(spec.pitch_low)), int(np.floor(spec.pitch_high)) + 1))
    else:
        semitones = rng.uniform(spec.pitch_low, spec.pitch_high)
    pitched = pitch_shift(samples, semitones, sample_rate)

    noisy = add_noise(samples, spec.noise_factor, _clip_rng(spec, source_id, "noise"))
    return {"time_shift": shifted, "pitch_shift": pitched, "noise": noisy}


def _augment_one(manifest: Manifest, row: ManifestRow, spec: AugmentSpec, out_root: Path) -> list[ManifestRow] | str:
    try:
        clip = load_clip(manifest, row)
        variants = make_variants(clip.samples, clip.sample_rate, row.id, spec)
        rows = []
        for kind in KINDS:
            vid = variant_id(row.id, kind, spec.seed)
            target = out_root / "audio" / f"{vid}.wav"
            write_wav(target, variants[kind], clip.sample_rate, sample_format="float32")
            rows.append(ManifestRow(vid, os.fspath(target), row.label, row.fold, kind, row.id))
        return rows
    except (OSError, MctaError) as exc:
        return str(exc)


def augment_manifest(
    manifest: Manifest,
    spec: AugmentSpec,
    out_dir: str | os.PathLike,
    folds: Sequence[int] | None = None,
    jobs: int = 1,
) -> Manifest:
    """Write augmented variants and return originals plus variants.

    Only originals whose fold is in ``folds`` (all folds by default) are
    expanded.  Every source is attempted; if any fail, nothing is returned
    and :class:`AugmentationError` lists each failure.
    """
    out_root = Path(out_dir)
    originals = [r for r in manifest.originals() if folds is None or r.fold in folds]
    if jobs > 1 and len(originals) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_augment_one, [manifest] * len(originals), originals, [spec] * len(originals), [out_root] * len(originals)))
    else:
        results = [_augment_one(manifest, row, spec, out_root) for row in originals]
    failures = [(row.id, res) for row, res in zip(originals, results) if isinstance(res, str)]
    if failures:
        raise AugmentationError(failures)
    rows = list(manifest.rows)
    for res in results:
        rows.extend(res)
    expanded = manifest.subset(rows)
    expanded.validate()
    return expanded


def write_augmented(manifest: Manifest, spec: AugmentSpec, out_dir: str | os.PathLike, folds=None, jobs: int = 1) -> Manifest:
    """:func:`augment_manifest` plus an ``augmented.csv`` next to the new audio."""
    expanded = augment_manifest(manifest, spec, out_dir, folds, jobs)
    absolute = expanded.subset(
        ManifestRow(r.id, os.fspath(expanded.resolve(r).resolve()), r.label, r.fold, r.variant_kind, r.source_id) for r in expanded.rows
    )
    absolute.root = Path(out_dir)
    save_manifest(absolute, Path(out_dir) / "augmented.csv")
    return absolute
