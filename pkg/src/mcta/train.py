"""Training, evaluation, cross-validation and ablation runs.

Every random choice flows from explicit seeds: model initialisation, the
per-epoch shuffle and the dropout masks each get their own stream derived
from ``(seed, fold, stream id)``.  Shuffling depends only on the seed and
the training-set size, so runs that differ only in attention mode see the
same batch sequence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from mcta.autograd import ops
from mcta.autograd.optim import Adam
from mcta.autograd.tensor import Tensor, no_grad
from mcta.config import config_hash, flatten, format_value
from mcta.data import Manifest, load_clip
from mcta.errors import DimensionError, InvalidInputError
from mcta.features import FeatureCache, FeatureConfig, FeatureInput
from mcta.model import AttentionMode, MCTANet, ModelConfig, param_count, save_checkpoint

log = logging.getLogger(__name__)

INIT_STREAM, SHUFFLE_STREAM, DROPOUT_STREAM = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 0.001
    lr_decay: float = 0.5
    batch_size: int = 50
    epochs: int = 50
    repeats: int = 5
    seed: int = 0
    # held-out folds to evaluate; empty means every fold in the manifest
    folds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.repeats < 1:
            raise InvalidInputError("repeats must be >= 1")
        if self.lr_init <= 0:
            raise InvalidInputError("lr_init must be positive")
        if not 0 < self.lr_decay <= 1:
            raise InvalidInputError("lr_decay must lie in (0, 1]")


def lr_update(losses: Sequence[float], lr: float, decay: float = 0.5) -> float:
    """Decay ``lr`` when the last two epoch-to-epoch changes were both non-decreasing."""
    if len(losses) == 0:
        raise InvalidInputError("lr_update needs at least one epoch loss")
    if len(losses) >= 3 and losses[-1] >= losses[-2] >= losses[-3]:
        return lr * decay
    return lr


# ---------------------------------------------------------------------------
# feature sets


@dataclass
class FeatureSet:
    """Stacked network inputs plus the manifest columns training needs."""

    x: np.ndarray  # N x 3 x T x F, float32
    labels: np.ndarray
    ids: list[str]
    source_ids: list[str]
    folds: np.ndarray
    original: np.ndarray  # bool mask

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "FeatureSet":
        index = np.asarray(index, dtype=np.int64)
        return FeatureSet(
            self.x[index],
            self.labels[index],
            [self.ids[i] for i in index],
            [self.source_ids[i] for i in index],
            self.folds[index],
            self.original[index],
        )

    def where(self, mask) -> "FeatureSet":
        return self.subset(np.flatnonzero(mask))


def _extract_one(args) -> tuple[np.ndarray, bool]:
    manifest, row, root, config = args
    cache = FeatureCache(root, config)
    feats, hit = cache.get(row.id, lambda: load_clip(manifest, row))
    return feats.data, hit


def extract_features(manifest: Manifest, cache_root, config: FeatureConfig = FeatureConfig(), jobs: int = 1) -> tuple[list[FeatureInput], int]:
    """Features for every manifest row, through the on-disk cache.

    Returns the features in manifest order and the number of cache hits.
    """
    tasks = [(manifest, row, os.fspath(cache_root), config) for row in manifest.rows]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_extract_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_extract_one(t) for t in tasks]
    feats = [FeatureInput(data, row.id) for (data, _), row in zip(results, manifest.rows)]
    return feats, sum(hit for _, hit in results)


def load_feature_set(manifest: Manifest, cache_root, config: FeatureConfig = FeatureConfig(), jobs: int = 1) -> FeatureSet:
    feats, _ = extract_features(manifest, cache_root, config, jobs)
    if not feats:
        raise InvalidInputError("manifest has no rows")
    shape = feats[0].data.shape
    for f in feats:
        if f.data.shape != shape:
            raise DimensionError(f"clip {f.source_id!r} has features {f.data.shape}, expected {shape} like the first clip")
    rows = manifest.rows
    return FeatureSet(
        np.stack([f.data for f in feats]),
        np.array([r.label for r in rows], dtype=np.int64),
        [r.id for r in rows],
        [r.source_id or r.id for r in rows],
        np.array([r.fold for r in rows], dtype=np.int64),
        np.array([r.is_original for r in rows], dtype=bool),
    )


# ---------------------------------------------------------------------------
# training


def _seed_key(seed) -> list[int]:
    return [int(s) for s in (seed if isinstance(seed, (list, tuple)) else [seed])]


def stream(seed, which: int) -> np.random.Generator:
    return np.random.default_rng(_seed_key(seed) + [which])


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatch indices; the last partial batch is kept.

    A trailing batch of one sample is folded into the previous batch, since
    batch statistics of a single sample are degenerate.
    """
    order = rng.permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


@dataclass
class FoldResult:
    model: MCTANet
    losses: list[float]
    lrs: list[float]  # learning rate used during each epoch
    batch_digest: str
    accuracy: float | None = None
    train_size: int = 0
    val_size: int = 0
    wall_time: float = 0.0


def train_fold(
    train: FeatureSet,
    val: FeatureSet | None,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed=0,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> FoldResult:
    """Train one model with Adam and the plateau learning-rate rule."""
    if len(train) < 2:
        raise InvalidInputError(f"training split has {len(train)} samples; need at least 2")
    if val is not None and len(val) == 0:
        raise InvalidInputError("validation split is empty")
    start = time.perf_counter()
    model = MCTANet(model_config, stream(seed, INIT_STREAM))
    opt = Adam(model.trainable_parameters(), lr=train_config.lr_init)
    shuffle_rng = stream(seed, SHUFFLE_STREAM)
    dropout_rng = stream(seed, DROPOUT_STREAM)
    digest = hashlib.sha256()
    lr = train_config.lr_init
    losses: list[float] = []
    lrs: list[float] = []
    for epoch in range(train_config.epochs):
        opt.lr = lr
        total = 0.0
        for idx in batches(len(train), train_config.batch_size, shuffle_rng):
            digest.update(idx.astype("<i8").tobytes())
            logits = model.forward(train.x[idx], training=True, rng=dropout_rng)
            loss = ops.softmax_cross_entropy(logits, train.labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(train))
        lrs.append(lr)
        if on_epoch:
            on_epoch(epoch, losses[-1], lr)
        lr = lr_update(losses, lr, train_config.lr_decay)
    result = FoldResult(model, losses, lrs, digest.hexdigest()[:16], train_size=len(train))
    if val is not None:
        result.accuracy = evaluate(model, val)
        result.val_size = len(val)
    result.wall_time = time.perf_counter() - start
    return result


def predict(model: MCTANet, x: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Eval-phase logits for ``N x 3 x T x F`` inputs."""
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.forward(Tensor(x[i : i + batch_size]), training=False).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise InvalidInputError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(model: MCTANet, data: FeatureSet, batch_size: int = 50) -> float:
    """Argmax accuracy in the eval phase."""
    if len(data) == 0:
        raise InvalidInputError("cannot evaluate on an empty set")
    return accuracy(predict(model, data.x, batch_size), data.labels)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class RunRecord:
    repeat: int
    seed: int
    fold: int
    accuracy: float
    losses: list[float]
    lrs: list[float]
    batch_digest: str
    train_size: int
    val_size: int
    wall_time: float


@dataclass
class RunReport:
    mode: str
    model_config: dict[str, str]
    train_config: dict[str, str]
    param_count: int
    seeds: list[int]
    runs: list[RunRecord] = field(default_factory=list)
    repeat_means: list[float] = field(default_factory=list)
    mean_accuracy: float = 0.0
    std_accuracy: float = 0.0
    wall_time: float = 0.0
    config_hash: str = ""

    def summarize(self) -> None:
        by_repeat: dict[int, list[float]] = {}
        for r in self.runs:
            by_repeat.setdefault(r.repeat, []).append(r.accuracy)
        self.repeat_means = [float(np.mean(by_repeat[k])) for k in sorted(by_repeat)]
        self.mean_accuracy = float(np.mean(self.repeat_means))
        self.std_accuracy = float(np.std(self.repeat_means, ddof=1)) if len(self.repeat_means) > 1 else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["runs"] = [RunRecord(**r) for r in d.get("runs", [])]
        return cls(**d)


def split_fold(data: FeatureSet, fold: int) -> tuple[FeatureSet, FeatureSet]:
    """Train on every row outside ``fold``; evaluate on the originals inside it.

    Raises if any training row derives from an evaluation clip.
    """
    val = data.where((data.folds == fold) & data.original)
    train = data.where(data.folds != fold)
    if len(val) == 0:
        raise InvalidInputError(f"fold {fold} has no original clips to evaluate")
    if len(train) == 0:
        raise InvalidInputError(f"no training data outside fold {fold}")
    held = set(val.ids)
    leaked = sorted({s for s in train.source_ids if s in held} | {i for i in train.ids if i in held})
    if leaked:
        raise InvalidInputError(f"fold {fold}: training rows derive from held-out clips {leaked[:5]}")
    return train, val


def _run_cell(data: FeatureSet, model_config: ModelConfig, train_config: TrainConfig, repeat: int, fold: int, checkpoint_dir) -> RunRecord:
    seed = train_config.seed + repeat
    train, val = split_fold(data, fold)
    res = train_fold(train, val, model_config, train_config, seed=[seed, fold])
    log.info("mode=%s repeat=%d fold=%d accuracy=%.4f loss=%.4f (%.1fs)", model_config.attention_mode.value, repeat, fold, res.accuracy, res.losses[-1], res.wall_time)
    if checkpoint_dir is not None:
        name = f"{model_config.attention_mode.value}-r{repeat}-f{fold}.ckpt"
        save_checkpoint(res.model, Path(checkpoint_dir) / name, {"seed": str(seed), "fold": str(fold), "accuracy": repr(res.accuracy)})
    return RunRecord(repeat, seed, fold, res.accuracy, res.losses, res.lrs, res.batch_digest, res.train_size, res.val_size, res.wall_time)


_WORKER_DATA: FeatureSet | None = None


def _init_worker(data: FeatureSet) -> None:
    global _WORKER_DATA
    _WORKER_DATA = data


def _run_cell_worker(args) -> RunRecord:
    return _run_cell(_WORKER_DATA, *args)


def resolve_folds(data: FeatureSet, train_config: TrainConfig) -> list[int]:
    present = sorted({int(f) for f in data.folds[data.original]})
    folds = list(train_config.folds) or present
    for f in folds:
        if f not in present:
            raise InvalidInputError(f"fold {f} has zero samples")
    return folds


def cross_validate(
    data: FeatureSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    jobs: int = 1,
    checkpoint_dir=None,
) -> RunReport:
    """K-fold cross-validation repeated with seeds ``seed + 0 .. seed + repeats - 1``."""
    start = time.perf_counter()
    folds = resolve_folds(data, train_config)
    cells = [(r, f) for r in range(train_config.repeats) for f in folds]
    if jobs > 1 and len(cells) > 1:
        args = [(model_config, train_config, r, f, checkpoint_dir) for r, f in cells]
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(data,)) as pool:
            runs = list(pool.map(_run_cell_worker, args))
    else:
        runs = [_run_cell(data, model_config, train_config, r, f, checkpoint_dir) for r, f in cells]
    report = RunReport(
        mode=model_config.attention_mode.value,
        model_config={k: format_value(v) for k, v in flatten(model_config).items()},
        train_config={k: format_value(v) for k, v in flatten(train_config).items()},
        param_count=param_count(model_config),
        seeds=[train_config.seed + r for r in range(train_config.repeats)],
        runs=runs,
        config_hash=config_hash(model_config, train_config),
    )
    report.summarize()
    report.wall_time = time.perf_counter() - start
    return report


@dataclass
class AblationReport:
    reports: dict[str, RunReport]

    def table(self) -> list[dict]:
        return [
            {"mode": m, "mean_accuracy": r.mean_accuracy, "std_accuracy": r.std_accuracy, "param_count": r.param_count}
            for m, r in self.reports.items()
        ]

    def batch_sequences_match(self) -> bool:
        keyed = [{(x.repeat, x.fold): x.batch_digest for x in r.runs} for r in self.reports.values()]
        return all(k == keyed[0] for k in keyed)

    def to_dict(self) -> dict:
        return {
            "table": self.table(),
            "batch_sequences_match": self.batch_sequences_match(),
            "modes": {m: r.to_dict() for m, r in self.reports.items()},
        }


def ablation(
    data: FeatureSet,
    base_config: ModelConfig,
    train_config: TrainConfig,
    modes: Sequence = tuple(AttentionMode),
    jobs: int = 1,
    checkpoint_dir=None,
) -> AblationReport:
    """Cross-validate each attention mode with identical seeds and data order."""
    reports = {}
    for mode in modes:
        mode = AttentionMode(mode)
        reports[mode.value] = cross_validate(data, base_config.with_mode(mode), train_config, jobs, checkpoint_dir)
    return AblationReport(reports)


def write_json(obj: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# attention introspection


def attention_vectors(model: MCTANet, x: np.ndarray) -> np.ndarray:
    """Eval-phase attention weights ``N x C' x T'`` (broadcast over channels
    for the single-channel mode)."""
    with no_grad():
        embedded = model.embed(Tensor(x), training=False)
        weights = model.attention_weights(embedded).numpy()[..., 0]
    return np.broadcast_to(weights, embedded.shape[:3]).copy()


def attention_dump(model: MCTANet, data: FeatureSet, channels: int = 5, seed: int = 0) -> list[tuple[str, int, int, float]]:
    """Rows ``(clip_id, channel, t, weight)`` for ``channels`` randomly chosen channels.

    The same channels are used for every clip.
    """
    width = model.config.hidden_channels
    if not 1 <= channels <= width:
        raise InvalidInputError(f"channel sample size must lie in [1, {width}], got {channels}")
    picks = np.sort(np.random.default_rng(seed).choice(width, size=channels, replace=False))
    rows = []
    for i in range(0, len(data), 50):
        weights = attention_vectors(model, data.x[i : i + 50])
        for clip_id, w in zip(data.ids[i : i + 50], weights):
            for c in picks:
                rows.extend((clip_id, int(c), t, float(v)) for t, v in enumerate(w[c]))
    return rows


def write_attention_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("clip_id,channel,t,weight\n")
        for clip_id, c, t, w in rows:
            fh.write(f"{clip_id},{c},{t},{w!r}\n")


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    """Mean cosine similarity over all distinct pairs of rows."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape[0] < 2:
        raise InvalidInputError("need at least two vectors")
    norms = np.linalg.norm(v, axis=1)
    unit = v / np.where(norms > 0, norms, 1.0)[:, None]
    sim = unit @ unit.T
    iu = np.triu_indices(v.shape[0], k=1)
    return float(sim[iu].mean())


def attention_diversity(model: MCTANet, data: FeatureSet, channels: int = 5, seed: int = 0) -> np.ndarray:
    """Per-clip mean pairwise cosine between ``channels`` sampled attention vectors."""
    picks = np.random.default_rng(seed).choice(model.config.hidden_channels, size=channels, replace=False)
    out = []
    for i in range(0, len(data), 50):
        for w in attention_vectors(model, data.x[i : i + 50]):
            out.append(mean_pairwise_cosine(w[picks]))
    return np.array(out)

