"""Manifests, WAV I/O and the seeded synthetic desk dataset.

A dataset root holds ``audio/*.wav`` plus ``manifest.csv`` with the columns
``id,path,label,fold,variant_kind,source_id``.  Originals use their own id
as ``source_id``; augmented variants point at the original they came from
and must share its fold.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile

from mcta.errors import InvalidInputError, ParseError
from mcta.features import AudioClip

COLUMNS = ("id", "path", "label", "fold", "variant_kind", "source_id")
VARIANT_KINDS = ("original", "time_shift", "pitch_shift", "noise")
DEFAULT_FOLDS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ManifestRow:
    id: str
    path: str
    label: int
    fold: int
    variant_kind: str = "original"
    source_id: str = ""

    @property
    def is_original(self) -> bool:
        return self.variant_kind == "original"


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    root: Path = Path(".")
    folds: tuple[int, ...] = DEFAULT_FOLDS

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def originals(self) -> list[ManifestRow]:
        return [r for r in self.rows if r.is_original]

    def by_id(self) -> dict[str, ManifestRow]:
        return {r.id: r for r in self.rows}

    def fold_ids(self) -> list[int]:
        return sorted({r.fold for r in self.rows if r.is_original})

    def subset(self, rows: Iterable[ManifestRow]) -> "Manifest":
        return Manifest(list(rows), self.root, self.folds)

    def validate(self) -> None:
        """Raise :class:`ParseError` naming the first offending row (1-based,
        header excluded)."""
        seen: dict[str, int] = {}
        for n, row in enumerate(self.rows, start=1):
            if row.id in seen:
                raise ParseError(f"row {n}: duplicate id {row.id!r} (first seen at row {seen[row.id]})")
            seen[row.id] = n
            if row.fold not in self.folds:
                raise ParseError(f"row {n}: fold {row.fold} is not one of the declared folds {list(self.folds)}")
            if row.variant_kind not in VARIANT_KINDS:
                raise ParseError(f"row {n}: unknown variant_kind {row.variant_kind!r}")
            if row.label < 0:
                raise ParseError(f"row {n}: negative label {row.label}")
        index = self.by_id()
        for n, row in enumerate(self.rows, start=1):
            if row.is_original:
                if row.source_id not in ("", row.id):
                    raise ParseError(f"row {n}: original {row.id!r} names a different source {row.source_id!r}")
                continue
            src = index.get(row.source_id)
            if src is None or not src.is_original:
                raise ParseError(f"row {n}: source_id {row.source_id!r} does not resolve to an original clip")
            if src.fold != row.fold:
                raise ParseError(f"row {n}: variant {row.id!r} is in fold {row.fold} but its source is in fold {src.fold}")
            if src.label != row.label:
                raise ParseError(f"row {n}: variant {row.id!r} has label {row.label}, source has {src.label}")


def load_manifest(path: str | os.PathLike, folds: Sequence[int] = DEFAULT_FOLDS, check_files: bool = True) -> Manifest:
    """Parse and validate a manifest CSV; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != COLUMNS:
        raise ParseError(f"{path}: header must be {','.join(COLUMNS)}")
    rows = []
    for n, rec in enumerate(reader, start=1):
        if not rec:
            continue
        if len(rec) != len(COLUMNS):
            raise ParseError(f"{path}: row {n} has {len(rec)} fields, expected {len(COLUMNS)}")
        rid, rpath, label, fold, kind, source = (v.strip() for v in rec)
        try:
            label_i, fold_i = int(label), int(fold)
        except ValueError:
            raise ParseError(f"{path}: row {n} has non-integer label or fold ({label!r}, {fold!r})") from None
        rows.append(ManifestRow(rid, rpath, label_i, fold_i, kind or "original", source or rid))
    manifest = Manifest(rows, path.parent, tuple(folds))
    try:
        manifest.validate()
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if check_files:
        for n, row in enumerate(rows, start=1):
            if not manifest.resolve(row).is_file():
                raise ParseError(f"{path}: row {n}: audio file {row.path!r} not found")
    return manifest


def save_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in manifest.rows:
        writer.writerow([r.id, r.path, r.label, r.fold, r.variant_kind, r.source_id or r.id])
    path.write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# public dataset layouts


def _read_table(path: Path, delimiter: str) -> list[list[str]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return [rec for rec in csv.reader(io.StringIO(text), delimiter=delimiter) if rec and any(v.strip() for v in rec)]


def import_esc(root: str | os.PathLike, esc10: bool = False, meta: str = "meta/esc50.csv", audio_dir: str = "audio") -> Manifest:
    """Manifest for an ESC-50 style tree: ``audio/*.wav`` plus a metadata CSV
    with ``filename``, ``fold`` and ``target`` columns.

    With ``esc10`` only rows flagged in the ``esc10`` column are kept and their
    targets are renumbered 0..9 in ascending order.
    """
    root = Path(root)
    table = _read_table(root / meta, ",")
    if not table:
        raise ParseError(f"{root / meta}: empty metadata file")
    header = [h.strip() for h in table[0]]
    needed = ["filename", "fold", "target"] + (["esc10"] if esc10 else [])
    missing = [c for c in needed if c not in header]
    if missing:
        raise ParseError(f"{root / meta}: missing columns {missing}")
    col = {name: header.index(name) for name in needed}
    records = []
    for n, rec in enumerate(table[1:], start=1):
        if len(rec) < len(header):
            raise ParseError(f"{root / meta}: row {n} has {len(rec)} fields, expected {len(header)}")
        if esc10 and rec[col["esc10"]].strip().lower() not in ("true", "1"):
            continue
        try:
            fold, target = int(rec[col["fold"]]), int(rec[col["target"]])
        except ValueError:
            raise ParseError(f"{root / meta}: row {n} has non-integer fold or target") from None
        records.append((rec[col["filename"]].strip(), fold, target))
    remap = {t: i for i, t in enumerate(sorted({t for _, _, t in records}))} if esc10 else None
    rows = []
    for filename, fold, target in records:
        cid = Path(filename).stem
        label = remap[target] if remap else target
        rows.append(ManifestRow(cid, f"{audio_dir}/{filename}", label, fold, "original", cid))
    manifest = Manifest(rows, root, DEFAULT_FOLDS)
    manifest.validate()
    return manifest


def import_dcase(root: str | os.PathLike, meta: str = "meta.txt", setup_dir: str = "evaluation_setup") -> tuple[Manifest, list[str]]:
    """Manifest for a DCASE style tree.

    ``meta.txt`` lists ``<relative wav path>\\t<scene label>`` per line and
    ``evaluation_setup/fold<k>_evaluate.txt`` lists the files held out in
    fold ``k``.  Labels are indices into the sorted scene names, which are
    returned alongside the manifest.
    """
    root = Path(root)
    entries = []
    for n, rec in enumerate(_read_table(root / meta, "\t"), start=1):
        if len(rec) < 2:
            raise ParseError(f"{root / meta}: line {n} needs a path and a scene label")
        entries.append((rec[0].strip(), rec[1].strip()))
    fold_of: dict[str, int] = {}
    setup = root / setup_dir
    fold_files = sorted(setup.glob("fold*_evaluate.txt")) if setup.is_dir() else []
    if not fold_files:
        raise ParseError(f"{setup}: no fold<k>_evaluate.txt files")
    for f in fold_files:
        digits = f.name[len("fold") : -len("_evaluate.txt")]
        if not digits.isdigit():
            raise ParseError(f"{f}: cannot read a fold number from the file name")
        for rec in _read_table(f, "\t"):
            wav = rec[0].strip()
            if wav in fold_of:
                raise ParseError(f"{f}: {wav!r} is already held out in fold {fold_of[wav]}")
            fold_of[wav] = int(digits)
    scenes = sorted({scene for _, scene in entries})
    label = {s: i for i, s in enumerate(scenes)}
    rows = []
    for n, (wav, scene) in enumerate(entries, start=1):
        if wav not in fold_of:
            raise ParseError(f"{root / meta}: line {n}: {wav!r} is not held out in any fold")
        cid = Path(wav).stem
        rows.append(ManifestRow(cid, wav, label[scene], fold_of[wav], "original", cid))
    manifest = Manifest(rows, root, tuple(sorted(set(fold_of.values()))))
    manifest.validate()
    return manifest, scenes


# ---------------------------------------------------------------------------
# WAV


def load_wav(path: str | os.PathLike, label: int = -1, fold: int = 0, clip_id: str | None = None) -> AudioClip:
    """Read a PCM (8/16/24/32-bit) or IEEE-float WAV as mono floats in [-1, 1].

    Multi-channel files are downmixed by averaging the channels.
    """
    try:
        rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError, struct.error, UnboundLocalError) as exc:
        # scipy hits UnboundLocalError when a RIFF file lacks fmt/data chunks
        raise ParseError(f"{path}: malformed WAV ({exc})") from exc
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128) / 128
    elif data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        samples = data / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ParseError(f"{path}: unsupported sample type {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise ParseError(f"{path}: no audio frames")
    return AudioClip(samples, int(rate), label=label, fold=fold, id=clip_id if clip_id is not None else Path(path).stem)


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int, sample_format: str = "int16") -> None:
    """Write mono audio as 16-bit PCM (default) or 32-bit float."""
    samples = np.asarray(samples, dtype=np.float64)
    if sample_format == "int16":
        data = np.clip(np.round(samples * 32768), -32768, 32767).astype(np.int16)
    elif sample_format == "float32":
        data = samples.astype(np.float32)
    else:
        raise InvalidInputError(f"unsupported sample format {sample_format!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(os.fspath(path), int(sample_rate), data)


def load_clip(manifest: Manifest, row: ManifestRow) -> AudioClip:
    return load_wav(manifest.resolve(row), label=row.label, fold=row.fold, clip_id=row.id)


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 8
    clips_per_class: int = 40
    clip_seconds: float = 5.0
    sample_rate: int = 22050
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "clips_per_class", "clip_seconds", "sample_rate"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"SynthSpec.{name} must be positive, got {getattr(self, name)}")

    @property
    def num_clips(self) -> int:
        return self.num_classes * self.clips_per_class


FAMILIES = ("tone", "chirp", "am_noise", "clicks", "tone_noise")


def class_family(label: int) -> tuple[str, int]:
    """Family name and variant index for a class; families cycle every five classes."""
    return FAMILIES[label % len(FAMILIES)], label // len(FAMILIES)


def _event(family: str, variant: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    jitter = rng.uniform(0.95, 1.05)
    if family == "tone":
        f = 440.0 * 2 ** (1.6 * variant) * jitter
        return np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if family == "chirp":
        f0, f1 = (300.0 * jitter, 3000.0 * jitter)
        if variant % 2:
            f0, f1 = f1, f0
        dur = n / sr
        return np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t**2 / (2 * dur)))
    if family == "am_noise":
        rate = (3.0 + 8.0 * variant) * jitter
        return rng.standard_normal(n) * 0.5 * (1 + np.sin(2 * np.pi * rate * t)) * 0.5
    if family == "clicks":
        rate = (8.0 + 12.0 * variant) * jitter
        out = np.zeros(n)
        period = max(1, int(round(sr / rate)))
        width = max(1, sr // 1000)
        for start in range(int(rng.integers(0, period)), n, period):
            out[start : start + width] = 1.0
        return out
    f = 2500.0 * 2 ** variant * jitter
    f = min(f, 0.45 * sr)
    return 0.7 * np.sin(2 * np.pi * f * t) + 0.3 * rng.standard_normal(n)


def synth_clip(spec: SynthSpec, label: int, index: int) -> np.ndarray:
    """Deterministically generate clip ``index`` of class ``label``.

    A class-specific event of 1 to 2.5 s sits at a random onset over a
    background of white noise, so the discriminative content is confined to
    a stretch of frames.
    """
    rng = np.random.default_rng([spec.seed, label, index])
    sr = spec.sample_rate
    total = int(round(spec.clip_seconds * sr))
    family, variant = class_family(label)
    length = min(total, int(rng.uniform(1.0, 2.5) * sr))
    onset = int(rng.integers(0, total - length + 1))
    event = _event(family, variant, length, sr, rng)
    ramp = min(length // 2, int(0.01 * sr))
    if ramp:
        env = np.ones(length)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
        event = event * env
    clip = rng.uniform(0.02, 0.1) * rng.standard_normal(total)
    clip[onset : onset + length] += rng.uniform(0.3, 0.7) * event
    return np.clip(clip, -1.0, 32767 / 32768)


def synth_dataset(spec: SynthSpec, out_dir: str | os.PathLike) -> Manifest:
    """Write the synthetic dataset as 16-bit WAVs plus ``manifest.csv``.

    Folds are assigned round-robin within each class, so every fold holds
    the same number of clips per class when ``clips_per_class`` is a
    multiple of five.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rows = []
    for label in range(spec.num_classes):
        for j in range(spec.clips_per_class):
            cid = f"synth-c{label:02d}-{j:03d}"
            rel = f"audio/{cid}.wav"
            write_wav(out / rel, synth_clip(spec, label, j), spec.sample_rate)
            rows.append(ManifestRow(cid, rel, label, j % 5 + 1, "original", cid))
    manifest = Manifest(rows, out, DEFAULT_FOLDS)
    save_manifest(manifest, out / "manifest.csv")
    return manifest


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))
