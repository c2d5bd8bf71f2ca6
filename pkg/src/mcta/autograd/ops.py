"""Differentiable operations used by the MCTA network.

All image-like tensors use the ``B x C x H x W`` layout.  In the network the
``H`` axis is time and ``W`` is mel frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mcta.autograd.tensor import Tensor, as_tensor, get_default_dtype
from mcta.errors import DimensionError, InvalidInputError


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    a, b = value
    return int(a), int(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def hadamard(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting (e.g. one attention vector
    shared across all channels)."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape("hadamard", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape("add", a, b)
    ashape, bshape = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, ashape), _unbroadcast(g, bshape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def divide(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),))


def reduce_sum(x: Tensor, axis: int, keep: bool = False) -> Tensor:
    """Sum over one axis; the gradient broadcasts ones back along it."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"reduce_sum: axis {axis} out of range for rank {x.ndim}")
    axis %= x.ndim
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keep)

    def backward(g):
        if not keep:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    src = x.shape
    return Tensor._from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, g, dtype=x.dtype),))


# ---------------------------------------------------------------------------
# activations


def elu(x: Tensor) -> Tensor:
    # expm1(min(x, 0)) <= x everywhere, so the max selects the right branch
    out = np.expm1(np.minimum(x.data, 0))
    np.maximum(x.data, out, out=out)

    def backward(g):
        slope = np.minimum(out, 0)
        slope += 1
        slope *= g
        return (slope,)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = x.data * pos
    return Tensor._from_op(out, (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    out = half * (np.tanh(half * x.data) + 1)

    def backward(g):
        return (g * out * (1 - out),)

    return Tensor._from_op(out, (x,), backward)


_ACTIVATIONS = {"elu": elu, "relu": relu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind.lower()]
    except KeyError:
        raise InvalidInputError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# convolution and pooling

_IM2COL_MAX_ROWS = 64


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation, ``B x Cin x H x W`` -> ``B x Cout x H' x W'``.

    Computed as one GEMM per kernel offset on a channel-major copy of the
    input, so memory stays at a small multiple of the input size.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channel axis (1) has {cin}, weight expects {cin_w}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise InvalidInputError(f"conv2d: bad stride {stride} or padding {padding}")
    if H + 2 * ph < kh:
        raise DimensionError(f"conv2d: height axis (2) is {H} + 2*{ph}, smaller than kernel {kh}")
    if W + 2 * pw < kw:
        raise DimensionError(f"conv2d: width axis (3) is {W} + 2*{pw}, smaller than kernel {kw}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    n = B * Ho * Wo
    dtype = x.dtype

    def channel_major_padded() -> np.ndarray:
        xt = np.zeros((cin, B, H + 2 * ph, W + 2 * pw), dtype=dtype)
        xt[:, :, ph : ph + H, pw : pw + W] = x.data.transpose(1, 0, 2, 3)
        return xt

    def window(i: int, j: int):
        return (slice(None), slice(None), slice(i, i + sh * (Ho - 1) + 1, sh), slice(j, j + sw * (Wo - 1) + 1, sw))

    w = weight.data
    # kernel-offset-major copy; strided weight slices would miss BLAS
    wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    # few input channels: one GEMM over an im2col buffer beats kh*kw thin ones
    use_cols = cin * kh * kw <= _IM2COL_MAX_ROWS

    def columns(xt: np.ndarray) -> np.ndarray:
        cols = np.empty((kh, kw, cin, n), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                cols[i, j] = xt[window(i, j)].reshape(cin, n)
        return cols.reshape(kh * kw * cin, n)

    if (sh, sw) == (1, 1):
        return _conv2d_shifted(x, weight, bias, wk, (ph, pw), Ho, Wo, use_cols, channel_major_padded)

    xt = channel_major_padded()
    if use_cols:
        acc = wk.transpose(2, 0, 1, 3).reshape(cout, kh * kw * cin) @ columns(xt)
    else:
        acc = np.zeros((cout, n), dtype=dtype)
        for i in range(kh):
            for j in range(kw):
                acc += wk[i, j] @ xt[window(i, j)].reshape(cin, n)
    del xt
    if bias is not None:
        acc += bias.data[:, None]
    out = np.ascontiguousarray(acc.reshape(cout, B, Ho, Wo).transpose(1, 0, 2, 3))
    del acc

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n)
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        need_w = weight.requires_grad
        need_x = x.requires_grad
        xt = channel_major_padded() if need_w else None
        gw = np.zeros_like(w) if need_w else None
        gxt = np.zeros((cin, B, H + 2 * ph, W + 2 * pw), dtype=dtype) if need_x else None
        if use_cols:
            if need_w:
                gw[...] = (gt @ columns(xt).T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            if need_x:
                wmat = wk.transpose(2, 0, 1, 3).reshape(cout, kh * kw * cin)
                gcols = (wmat.T @ gt).reshape(kh, kw, cin, B, Ho, Wo)
                for i in range(kh):
                    for j in range(kw):
                        gxt[window(i, j)] += gcols[i, j]
        else:
            for i in range(kh):
                for j in range(kw):
                    win = window(i, j)
                    if need_w:
                        gw[:, :, i, j] = gt @ xt[win].reshape(cin, n).T
                    if need_x:
                        gxt[win] += (wk[i, j].T @ gt).reshape(cin, B, Ho, Wo)
        gx = None
        if need_x:
            gx = np.ascontiguousarray(gxt[:, :, ph : ph + H, pw : pw + W].transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def _conv2d_shifted(x: Tensor, weight: Tensor, bias: Tensor | None, wk: np.ndarray, padding, Ho: int, Wo: int, use_cols: bool, padded) -> Tensor:
    # Unit stride: on the flattened padded input, kernel offset (i, j) is a
    # plain shift by i * Wp + j, so every GEMM reads a contiguous slice.
    # Outputs are computed on the padded grid and cropped afterwards.
    B, cin, H, W = x.shape
    cout, _, kh, kw = weight.shape
    ph, pw = padding
    Hp, Wp = H + 2 * ph, W + 2 * pw
    N = B * Hp * Wp
    L = N - (kh - 1) * Wp - (kw - 1)
    offsets = [i * Wp + j for i in range(kh) for j in range(kw)]
    dtype = x.dtype
    wmat = wk.transpose(2, 0, 1, 3).reshape(cout, kh * kw * cin) if use_cols else None

    def columns(flat: np.ndarray) -> np.ndarray:
        cols = np.empty((kh * kw, cin, L), dtype=dtype)
        for k, off in enumerate(offsets):
            cols[k] = flat[:, off : off + L]
        return cols.reshape(kh * kw * cin, L)

    flat = padded().reshape(cin, N)
    acc = np.zeros((cout, N), dtype=dtype)
    if use_cols:
        np.matmul(wmat, columns(flat), out=acc[:, :L])
    else:
        tmp = np.empty((cout, L), dtype=dtype)
        for k, off in enumerate(offsets):
            np.matmul(wk[k // kw, k % kw], flat[:, off : off + L], out=tmp)
            acc[:, :L] += tmp
    del flat
    if bias is not None:
        acc += bias.data[:, None]
    out = np.ascontiguousarray(acc.reshape(cout, B, Hp, Wp)[:, :, :Ho, :Wo].transpose(1, 0, 2, 3))
    del acc

    def backward(g):
        gfull = np.zeros((cout, B, Hp, Wp), dtype=dtype)
        gfull[:, :, :Ho, :Wo] = g.transpose(1, 0, 2, 3)
        gfull = gfull.reshape(cout, N)[:, :L]
        gb = gfull.sum(axis=1) if bias is not None and bias.requires_grad else None
        need_w = weight.requires_grad
        need_x = x.requires_grad
        gw = gx = None
        flat = padded().reshape(cin, N) if need_w else None
        gflat = np.zeros((cin, N), dtype=dtype) if need_x else None
        if use_cols:
            if need_w:
                gw = np.ascontiguousarray((gfull @ columns(flat).T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
            if need_x:
                gcols = (wmat.T @ gfull).reshape(kh * kw, cin, L)
                for k, off in enumerate(offsets):
                    gflat[:, off : off + L] += gcols[k]
        else:
            if need_w:
                gw = np.empty(weight.shape, dtype=dtype)
                for k, off in enumerate(offsets):
                    gw[:, :, k // kw, k % kw] = gfull @ flat[:, off : off + L].T
            if need_x:
                tmp = np.empty((cin, L), dtype=dtype)
                for k, off in enumerate(offsets):
                    np.matmul(wk[k // kw, k % kw].T, gfull, out=tmp)
                    gflat[:, off : off + L] += tmp
        if need_x:
            gxt = gflat.reshape(cin, B, Hp, Wp)
            gx = np.ascontiguousarray(gxt[:, :, ph : ph + H, pw : pw + W].transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling without padding; ties resolve to the first element of the
    window in row-major order, which is also where the gradient goes."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: expected 4-D input, got {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    B, C, H, W = x.shape
    if H < kh:
        raise DimensionError(f"maxpool2d: height axis (2) is {H}, smaller than kernel {kh}")
    if W < kw:
        raise DimensionError(f"maxpool2d: width axis (3) is {W}, smaller than kernel {kw}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    xd = x.data
    if (sh, sw) == (kh, kw):
        return _maxpool_tiled(x, kh, kw, Ho, Wo)

    def window(i: int, j: int):
        return (slice(None), slice(None), slice(i, i + sh * (Ho - 1) + 1, sh), slice(j, j + sw * (Wo - 1) + 1, sw))

    out = xd[window(0, 0)].copy()
    arg = np.zeros(out.shape, dtype=np.int16)
    for i in range(kh):
        for j in range(kw):
            if i == 0 and j == 0:
                continue
            cand = xd[window(i, j)]
            better = cand > out
            np.copyto(out, cand, where=better)
            arg[better] = i * kw + j

    def backward(g):
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[window(i, j)] += g * (arg == i * kw + j)
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


def _maxpool_tiled(x: Tensor, kh: int, kw: int, Ho: int, Wo: int) -> Tensor:
    # Non-overlapping windows: gather each window into a trailing axis.
    B, C, H, W = x.shape
    tiles = x.data[:, :, : Ho * kh, : Wo * kw].reshape(B, C, Ho, kh, Wo, kw)
    tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, kh * kw)
    arg = tiles.argmax(axis=-1)[..., None]
    out = np.take_along_axis(tiles, arg, axis=-1)[..., 0]
    del tiles

    def backward(g):
        gt = np.zeros((B, C, Ho, Wo, kh * kw), dtype=g.dtype)
        np.put_along_axis(gt, arg, g[..., None], axis=-1)
        gt = gt.reshape(B, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * kh, Wo * kw)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, : Ho * kh, : Wo * kw] = gt
        return (gx,)

    return Tensor._from_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization and regularization


@dataclass
class BatchNormState:
    """Learnable affine pair plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None) -> "BatchNormState":
        dtype = dtype or get_default_dtype()
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over every axis except the channel axis (1).

    In training mode batch statistics are used and the running statistics
    are updated in place; otherwise the running statistics are used.
    """
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise DimensionError(f"batchnorm: channel axis (1) of {x.shape} does not match {state.channels} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, state.channels) + (1,) * (x.ndim - 2)
    gamma, beta = state.gamma, state.beta
    xd = x.data
    dtype = xd.dtype

    if training:
        count = xd.size // state.channels
        if count == 0:
            raise InvalidInputError("batchnorm: empty batch in training mode")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        unbiased = var * count / (count - 1) if count > 1 else var
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        count = 0
        mean = state.running_mean
        var = state.running_var
    invstd = (1.0 / np.sqrt(var + state.eps)).astype(dtype)
    xhat = xd - mean.reshape(bshape).astype(dtype)
    xhat *= invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape)
    out += beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale = (gamma.data * invstd).reshape(bshape)
            if training:
                # d/dx of gamma * xhat, with batch mean and variance depending on x
                s1 = (g.sum(axis=axes) / count).reshape(bshape)
                s2 = ((g * xhat).sum(axis=axes) / count).reshape(bshape) if ggamma is None else (ggamma / count).reshape(bshape)
                gx = xhat * s2
                np.subtract(g, gx, out=gx)
                gx -= s1
                gx *= scale
            else:
                gx = g * scale
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not 0 <= rate < 1:
        raise InvalidInputError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise InvalidInputError("dropout in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# classifier head


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``B x D`` and weight ``K x D``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input feature axis (1) has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias must have shape ({weight.shape[0]},), got {bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected B x K logits, got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != B:
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {B}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise InvalidInputError(f"softmax_cross_entropy: labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(B), labels].mean()

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(B), labels] -= 1
        return (probs * (g / B),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
