"""Log-mel + delta + delta-delta input features.

The front-end mirrors the usual librosa defaults: centred Hann-windowed
frames with reflect padding, a Slaney-style area-normalised mel filterbank,
power in dB with a 1e-10 floor, and regression deltas over 9 frames.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mcta import tensorio
from mcta.errors import CacheError, DimensionError, InvalidInputError

log = logging.getLogger(__name__)

N_FFT = 1024
HOP = 512
N_MELS = 128
DELTA_WIDTH = 9
POWER_FLOOR = 1e-10


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: int = -1
    fold: int = 0
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise InvalidInputError(f"clip {self.id!r} has no samples")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"clip {self.id!r} has sample rate {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureInput:
    """``3 x T x F`` network input: log-mel (dB), delta, delta-delta."""

    data: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise DimensionError(f"feature input must be 3 x T x F, got {self.data.shape}")

    @property
    def frame_count(self) -> int:
        return self.data.shape[1]

    @property
    def mel_bins(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = N_FFT
    hop: int = HOP
    n_mels: int = N_MELS
    delta_width: int = DELTA_WIDTH
    power_floor: float = POWER_FLOOR

    def digest(self) -> str:
        text = ",".join(f"{k}={v}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def frame_count(num_samples: int, hop: int = HOP) -> int:
    return 1 + num_samples // hop


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the FFT-friendly variant)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Complex STFT of centred, reflect-padded frames; shape ``T x (n_fft//2 + 1)``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise InvalidInputError("stft of an empty signal")
    pad = n_fft // 2
    if samples.size > 1:
        padded = np.pad(samples, pad, mode="reflect")
    else:
        padded = np.pad(samples, pad, mode="edge")
    count = frame_count(samples.size, hop)
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:count]
    return np.fft.rfft(frames * hann(n_fft), axis=1)


def stft_power(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    spec = stft(samples, n_fft, hop)
    return spec.real**2 + spec.imag**2


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    mels = freq / f_sp
    return np.where(freq >= min_log_hz, min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep, mels)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(mels >= min_log_mel, min_log_hz * np.exp(logstep * (mels - min_log_mel)), f_sp * mels)


@functools.lru_cache(maxsize=16)
def _filterbank(sample_rate: float, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.flags.writeable = False
    return weights


def mel_filterbank(sample_rate: float, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular, area-normalised mel filters; shape ``n_mels x (n_fft//2 + 1)``."""
    if sample_rate <= 0:
        raise InvalidInputError(f"sample rate must be positive, got {sample_rate}")
    fmax = sample_rate / 2 if fmax is None else fmax
    return _filterbank(float(sample_rate), int(n_fft), int(n_mels), float(fmin), float(fmax))


def log_mel(power: np.ndarray, fb: np.ndarray, floor: float = POWER_FLOOR) -> np.ndarray:
    if power.shape[-1] != fb.shape[1]:
        raise DimensionError(f"log_mel: spectrogram has {power.shape[-1]} bins, filterbank expects {fb.shape[1]}")
    return 10.0 * np.log10(np.maximum(power @ fb.T, floor))


def deltas(feature: np.ndarray, width: int = DELTA_WIDTH, order: int = 1) -> np.ndarray:
    """Regression-slope deltas along the time axis (axis 0).

    Each output frame is the least-squares slope through ``width`` frames
    centred on it; frames beyond the ends repeat the edge frame.
    """
    if width < 3 or width % 2 == 0:
        raise InvalidInputError(f"delta width must be odd and >= 3, got {width}")
    if order not in (1, 2):
        raise InvalidInputError(f"delta order must be 1 or 2, got {order}")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[0] < 1:
        raise InvalidInputError("delta of an empty feature map")
    half = width // 2
    frames = feature.shape[0]
    norm = 2.0 * sum(n * n for n in range(1, half + 1))
    out = feature
    for _ in range(order):
        padded = np.pad(out, [(half, half)] + [(0, 0)] * (out.ndim - 1), mode="edge")
        acc = np.zeros_like(out)
        for n in range(1, half + 1):
            acc += n * (padded[half + n : half + n + frames] - padded[half - n : half - n + frames])
        out = acc / norm
    return out


def make_input(clip: AudioClip, config: FeatureConfig = FeatureConfig()) -> FeatureInput:
    power = stft_power(clip.samples, config.n_fft, config.hop)
    fb = mel_filterbank(clip.sample_rate, config.n_fft, config.n_mels)
    mel = log_mel(power, fb, config.power_floor)
    d1 = deltas(mel, config.delta_width, order=1)
    d2 = deltas(mel, config.delta_width, order=2)
    data = np.stack([mel, d1, d2]).astype(np.float32)
    return FeatureInput(data=data, source_id=clip.id)


class FeatureCache:
    """On-disk cache of extracted features, one blob per clip id.

    Blobs live under a sub-directory keyed by the feature configuration so
    that changing the front-end never serves stale features.
    """

    def __init__(self, root: str | os.PathLike, config: FeatureConfig = FeatureConfig()):
        self.config = config
        self.root = Path(root) / f"features-{config.digest()}"

    def path_for(self, clip_id: str) -> Path:
        safe = re.sub(r"[^A-Za-z0-9._-]", "_", clip_id)
        return self.root / f"{safe}.mcta"

    def load(self, clip_id: str) -> FeatureInput:
        return FeatureInput(tensorio.load(self.path_for(clip_id)), source_id=clip_id)

    def get(self, clip_id: str, loader) -> tuple[FeatureInput, bool]:
        """Return cached features, extracting via ``loader()`` on a miss.

        A corrupt blob is logged and re-extracted.  The boolean is True on a
        cache hit.
        """
        path = self.path_for(clip_id)
        if path.exists():
            try:
                return self.load(clip_id), True
            except (CacheError, DimensionError) as exc:
                log.warning("re-extracting %s: corrupt cache file %s (%s)", clip_id, path, exc)
        clip = loader()
        feats = make_input(clip, self.config)
        feats.source_id = clip_id
        tensorio.save(path, feats.data)
        return feats, False
