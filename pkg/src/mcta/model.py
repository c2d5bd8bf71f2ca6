"""The MCTA network: convolutional embedding, temporal attention, classifier.

Input feature maps are ``B x 3 x T x F`` (time on axis 2, mel bins on
axis 3).  The embedding block collapses the mel axis to one bin and
downsamples time, giving ``X'`` of shape ``B x C' x T' x 1``.  A 1x1
convolution then produces both the attention logits and the linear branch;
the attended features are summed over time into ``H``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from mcta import tensorio
from mcta.autograd import ops
from mcta.autograd.gradcheck import check_gradients
from mcta.autograd.ops import BatchNormState
from mcta.autograd.tensor import Tensor, default_dtype, get_default_dtype
from mcta.config import apply_overrides, flatten, format_value
from mcta.errors import CacheError, DimensionError, InvalidInputError, ParseError


class AttentionMode(str, enum.Enum):
    MCTA = "mcta"
    SINGLE = "single"
    NONE = "none"


def _pool_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


@dataclass(frozen=True)
class EmbeddingConfig:
    """Two conv blocks (conv-BN-ELU x2, then max-pool) and a final strided conv."""

    mel_bins: int = 128
    block1_filters: int = 48
    block2_filters: int = 96
    conv_kernel: tuple[int, ...] = (3, 3)
    pool1: tuple[int, ...] = (2, 8)
    pool2: tuple[int, ...] = (2, 4)
    final_kernel: tuple[int, ...] = (5, 4)
    final_stride: tuple[int, ...] = (2, 1)

    def output_frames(self, frames: int) -> int:
        t = _pool_out(frames, self.pool1[0], self.pool1[0])
        t = _pool_out(t, self.pool2[0], self.pool2[0])
        return _pool_out(t, self.final_kernel[0], self.final_stride[0])

    def output_bins(self) -> int:
        f = _pool_out(self.mel_bins, self.pool1[1], self.pool1[1])
        f = _pool_out(f, self.pool2[1], self.pool2[1])
        return _pool_out(f, self.final_kernel[1], self.final_stride[1])

    def min_frames(self) -> int:
        t = 1
        while self.output_frames(t) < 1:
            t += 1
        return t


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 50
    hidden_channels: int = 512
    attention_mode: AttentionMode = AttentionMode.MCTA
    shared_attention_conv: bool = True
    dropout_rate: float = 0.3
    attention_eps: float = 1e-8
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)

    def __post_init__(self):
        object.__setattr__(self, "attention_mode", AttentionMode(self.attention_mode))
        if self.hidden_channels <= 0:
            raise InvalidInputError("hidden_channels must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise InvalidInputError("dropout_rate must lie in [0, 1)")
        if self.num_classes < 2:
            raise InvalidInputError("num_classes must be at least 2")
        emb = self.embedding
        if min(emb.block1_filters, emb.block2_filters, emb.mel_bins) <= 0:
            raise InvalidInputError("embedding filter counts and mel_bins must be positive")
        if any(k % 2 == 0 for k in emb.conv_kernel):
            raise InvalidInputError("embedding conv_kernel must be odd for same padding")
        if emb.output_bins() != 1:
            raise InvalidInputError(f"embedding leaves {emb.output_bins()} mel bins; it must collapse them to 1")

    def with_mode(self, mode) -> "ModelConfig":
        return apply_overrides(self, {"attention_mode": AttentionMode(mode)})


def desk_config(num_classes: int = 8, mode=AttentionMode.MCTA) -> ModelConfig:
    """A narrow variant that keeps the default layer layout but trains on one CPU core."""
    return ModelConfig(
        num_classes=num_classes,
        hidden_channels=64,
        attention_mode=AttentionMode(mode),
        embedding=EmbeddingConfig(block1_filters=8, block2_filters=16),
    )


def toy_config(mode=AttentionMode.MCTA, num_classes: int = 3) -> ModelConfig:
    """A tiny network (C' = 8) for 3 x 16 x 16 inputs, used by gradient checks."""
    return ModelConfig(
        num_classes=num_classes,
        hidden_channels=8,
        attention_mode=AttentionMode(mode),
        embedding=EmbeddingConfig(
            mel_bins=16,
            block1_filters=2,
            block2_filters=3,
            pool1=(2, 2),
            pool2=(1, 2),
            final_kernel=(3, 4),
            final_stride=(1, 1),
        ),
    )


@dataclass
class AttentionOutputs:
    weights: Tensor  # A: B x C' x T' x 1, or B x 1 x T' x 1 in single-channel mode
    linear: Tensor  # X'_L
    attended: Tensor  # X'_A
    hidden_pre: Tensor  # H before batch norm, B x C'
    hidden: Tensor  # H after batch norm and ReLU


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Name and shape of every learnable tensor, in checkpoint order."""
    emb = config.embedding
    kh, kw = emb.conv_kernel
    c1, c2, c = emb.block1_filters, emb.block2_filters, config.hidden_channels
    convs = [
        ("embed.conv1", (c1, 3, kh, kw)),
        ("embed.conv2", (c1, c1, kh, kw)),
        ("embed.conv3", (c2, c1, kh, kw)),
        ("embed.conv4", (c2, c2, kh, kw)),
        ("embed.conv5", (c, c2) + tuple(emb.final_kernel)),
    ]
    if config.shared_attention_conv:
        convs.append(("attend.conv", (c, c, 1, 1)))
    else:
        convs += [("attend.conv_att", (c, c, 1, 1)), ("attend.conv_lin", (c, c, 1, 1))]
    shapes = []
    for name, wshape in convs:
        shapes += [(f"{name}.weight", wshape), (f"{name}.bias", (wshape[0],))]
        if name.startswith("embed."):
            bn = name.replace("conv", "bn")
            shapes += [(f"{bn}.gamma", (wshape[0],)), (f"{bn}.beta", (wshape[0],))]
    shapes += [("attend.bn.gamma", (c,)), ("attend.bn.beta", (c,))]
    shapes += [("head.weight", (config.num_classes, c)), ("head.bias", (config.num_classes,))]
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(config))


def param_table(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, shape, int(np.prod(shape))) for name, shape in parameter_shapes(config)]


class MCTANet:
    """Parameters, batch-norm state and forward pass of one network."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | int | None = 0):
        self.config = config
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        dtype = get_default_dtype()
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        for name, shape in parameter_shapes(config):
            if name.endswith(".gamma") or name.endswith(".beta"):
                continue
            # fan-in uniform bound, as in common framework defaults
            weight_shape = shape if name.endswith(".weight") else None
            if weight_shape is None:
                weight_shape = dict(parameter_shapes(config))[name[: -len(".bias")] + ".weight"]
            bound = 1.0 / np.sqrt(np.prod(weight_shape[1:]))
            self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype, name=name)
        for name, shape in parameter_shapes(config):
            if name.endswith(".gamma"):
                key = name[: -len(".gamma")]
                state = BatchNormState.create(shape[0], config.bn_momentum, config.bn_eps, dtype)
                state.gamma.name = f"{key}.gamma"
                state.beta.name = f"{key}.beta"
                self.bn[key] = state

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, _ in parameter_shapes(self.config):
            if name.endswith(".gamma"):
                yield name, self.bn[name[: -len(".gamma")]].gamma
            elif name.endswith(".beta"):
                yield name, self.bn[name[: -len(".beta")]].beta
            else:
                yield name, self.params[name]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        """Parameters that receive gradients in the configured attention mode."""
        skip = set()
        if self.config.attention_mode is AttentionMode.NONE and not self.config.shared_attention_conv:
            skip = {"attend.conv_att.weight", "attend.conv_att.bias"}
        return [t for name, t in self.named_parameters() if name not in skip]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    # -- forward --------------------------------------------------------------

    def _conv_bn_elu(self, x: Tensor, name: str, training: bool, stride=(1, 1), same: bool = True) -> Tensor:
        w = self.params[f"embed.{name}.weight"]
        pad = (w.shape[2] // 2, w.shape[3] // 2) if same else (0, 0)
        x = ops.conv2d(x, w, self.params[f"embed.{name}.bias"], stride=stride, padding=pad)
        x = ops.batchnorm(x, self.bn[f"embed.{name.replace('conv', 'bn')}"], training)
        return ops.elu(x)

    def embed(self, x, training: bool = False) -> Tensor:
        """``B x 3 x T x F`` features -> ``B x C' x T' x 1`` embedded vectors."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        emb = self.config.embedding
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"embed: expected B x 3 x T x F input, got {x.shape}")
        if x.shape[3] != emb.mel_bins:
            raise DimensionError(f"embed: mel axis (3) has {x.shape[3]} bins, model expects {emb.mel_bins}")
        if emb.output_frames(x.shape[2]) < 1:
            raise InvalidInputError(f"embed: {x.shape[2]} frames is too short; need at least {emb.min_frames()}")
        h = self._conv_bn_elu(x, "conv1", training)
        h = self._conv_bn_elu(h, "conv2", training)
        h = ops.maxpool2d(h, emb.pool1)
        h = self._conv_bn_elu(h, "conv3", training)
        h = self._conv_bn_elu(h, "conv4", training)
        h = ops.maxpool2d(h, emb.pool2)
        return self._conv_bn_elu(h, "conv5", training, stride=emb.final_stride, same=False)

    def _pointwise(self, x: Tensor, name: str) -> Tensor:
        return ops.conv2d(x, self.params[f"attend.{name}.weight"], self.params[f"attend.{name}.bias"])

    def _branch_logits(self, embedded: Tensor) -> tuple[Tensor, Tensor]:
        if self.config.shared_attention_conv:
            z = self._pointwise(embedded, "conv")
            return z, z
        return self._pointwise(embedded, "conv_att"), self._pointwise(embedded, "conv_lin")

    def attention_weights(self, embedded: Tensor, logits: Tensor | None = None) -> Tensor:
        """Temporal attention weights for ``embedded`` (``B x C' x T' x 1``).

        MCTA normalizes each channel's sigmoid map over time; single-channel
        mode first averages the sigmoid map over channels; no-attention mode
        returns ones.
        """
        mode = self.config.attention_mode
        if mode is AttentionMode.NONE:
            return Tensor(np.ones(embedded.shape), dtype=embedded.dtype)
        if logits is None:
            logits = self._branch_logits(embedded)[0]
        gate = ops.sigmoid(logits)
        if mode is AttentionMode.SINGLE:
            gate = ops.hadamard(ops.reduce_sum(gate, axis=1, keep=True), 1.0 / gate.shape[1])
        total = ops.add(ops.reduce_sum(gate, axis=2, keep=True), self.config.attention_eps)
        return ops.divide(gate, total)

    def attend(self, embedded: Tensor, training: bool = False) -> AttentionOutputs:
        att_logits, lin = self._branch_logits(embedded)
        weights = self.attention_weights(embedded, att_logits)
        attended = ops.hadamard(lin, weights)
        B, C = embedded.shape[:2]
        hidden_pre = ops.reshape(ops.reduce_sum(attended, axis=2), (B, C))
        hidden = ops.relu(ops.batchnorm(hidden_pre, self.bn["attend.bn"], training))
        return AttentionOutputs(weights, lin, attended, hidden_pre, hidden)

    def forward_with_attention(self, x, training: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, AttentionOutputs]:
        out = self.attend(self.embed(x, training), training)
        h = ops.dropout(out.hidden, self.config.dropout_rate, training, rng)
        return ops.linear(h, self.params["head.weight"], self.params["head.bias"]), out

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Raw class logits, ``B x num_classes``."""
        return self.forward_with_attention(x, training, rng)[0]

    __call__ = forward

    # -- state ---------------------------------------------------------------

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every array a checkpoint needs: parameters then running statistics."""
        arrays = [(name, t.data) for name, t in self.named_parameters()]
        for key, state in self.bn.items():
            arrays += [(f"{key}.running_mean", state.running_mean), (f"{key}.running_var", state.running_var)]
        return arrays


def model_gradcheck(config: ModelConfig | None = None, batch: int = 4, frames: int = 16, points: int = 20, seed: int = 0) -> dict[str, float]:
    """End-to-end finite-difference check of every parameter in 64-bit mode.

    Runs the training-phase forward pass (batch statistics, dropout with a
    fixed mask) into the cross-entropy loss.  Returns the worst relative
    error per parameter name.
    """
    config = config or toy_config()
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        net = MCTANet(config, rng)
        x = Tensor(rng.normal(size=(batch, 3, frames, config.embedding.mel_bins)))
        labels = rng.integers(0, config.num_classes, size=batch)

        def loss():
            logits = net.forward(x, training=True, rng=np.random.default_rng(seed + 1))
            return ops.softmax_cross_entropy(logits, labels)

        trainable = {id(t) for t in net.trainable_parameters()}
        named = [(n, t) for n, t in net.named_parameters() if id(t) in trainable]
        errs = check_gradients(loss, [t for _, t in named], points=points, rng=rng)
    return {n: e for (n, _), e in zip(named, errs)}


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "MCTA-CHECKPOINT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: MCTANet, path, extra: dict[str, str] | None = None) -> None:
    """Text header (config and array manifest) followed by tensor blobs.

    ::

        MCTA-CHECKPOINT 1
        [config]
        hidden_channels = 512
        ...
        [arrays]
        embed.conv1.weight 48,3,3,3
        ...
        [data]
        <one tensor blob per array, in manifest order>
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", "[config]"]
    lines += [f"{k} = {format_value(v)}" for k, v in flatten(model.config).items()]
    if extra:
        lines.append("[meta]")
        lines += [f"{k} = {v}" for k, v in extra.items()]
    lines.append("[arrays]")
    arrays = model.state_arrays()
    lines += [f"{name} {','.join(str(d) for d in arr.shape)}" for name, arr in arrays]
    lines.append("[data]")
    payload = ("\n".join(lines) + "\n").encode()
    payload += b"".join(tensorio.encode(arr) for _, arr in arrays)
    tensorio.atomic_write(path, payload)


def load_checkpoint(path) -> tuple[MCTANet, dict[str, str]]:
    """Rebuild a model from :func:`save_checkpoint` output; also returns ``[meta]``."""
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: not an MCTA checkpoint")
        if first[1] != str(CHECKPOINT_VERSION):
            raise ParseError(f"{path}: unsupported checkpoint version {first[1]}")
        sections: dict[str, list[str]] = {}
        current = None
        while True:
            raw = fh.readline()
            if not raw:
                raise ParseError(f"{path}: missing [data] section")
            line = raw.decode().rstrip("\n")
            if line == "[data]":
                break
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                sections[current] = []
            elif current is None:
                raise ParseError(f"{path}: content before first section")
            elif line.strip():
                sections[current].append(line)
        config_values = {}
        for line in sections.get("config", []):
            k, _, v = line.partition("=")
            config_values[k.strip()] = v.strip()
        meta = {}
        for line in sections.get("meta", []):
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
        config = apply_overrides(ModelConfig(), config_values)
        model = MCTANet(config, rng=0)
        expected = dict(model.state_arrays())
        listed = []
        for line in sections.get("arrays", []):
            name, _, dims = line.rpartition(" ")
            listed.append((name, tuple(int(d) for d in dims.split(",") if d)))
        if [n for n, _ in listed] != list(expected):
            raise ParseError(f"{path}: array manifest does not match the configured model")
        for name, shape in listed:
            arr = tensorio.read_from(fh)
            if arr.shape != shape or expected[name].shape != shape:
                raise CacheError(f"{path}: array {name} has shape {arr.shape}, expected {expected[name].shape}")
            expected[name][...] = arr
    return model, meta
