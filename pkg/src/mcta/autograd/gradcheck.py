"""Central finite-difference checks for the differentiable ops."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mcta.autograd import ops
from mcta.autograd.tensor import Tensor, default_dtype, no_grad

DEFAULT_STEP = 1e-5
# gradients smaller than this are compared absolutely
GRAD_FLOOR = 1e-6


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    points: int = 20,
    step: float = DEFAULT_STEP,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Compare backprop gradients against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current contents of
    ``tensors`` on every call (it is re-run for each perturbation).  At most
    ``points`` entries per tensor are probed; smaller tensors are probed
    exhaustively.

    Returns:
        The worst relative error observed for each tensor, in order.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.grad = None

    worst = []
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        if flat.size <= points:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=points, replace=False)
        errs = []
        for k in picks:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + step
                up = loss_fn().item()
                flat[k] = orig - step
                down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2 * step)
            errs.append(float(relative_error(grad.reshape(-1)[k], numeric)))
        worst.append(max(errs))
    return worst


def _cotangent(out: Tensor, rng: np.random.Generator) -> Tensor:
    # random weights so every output element contributes distinctly to the loss
    return Tensor(rng.normal(size=out.shape), dtype=np.float64)


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, dtype=np.float64)


def _check_unary(fn, shape, rng, points, shift=0.0) -> float:
    x = _param(rng, *shape)
    x.data += shift
    w = _cotangent(fn(x), rng)
    return max(check_gradients(lambda: ops.sum_all(ops.hadamard(fn(x), w)), [x], points, rng=rng))


def _check_conv2d(rng, points):
    x = _param(rng, 2, 3, 7, 6)
    w = _param(rng, 4, 3, 3, 2)
    b = _param(rng, 4)
    f = lambda: ops.conv2d(x, w, b, stride=(2, 1), padding=(1, 1))
    c = _cotangent(f(), rng)
    return max(check_gradients(lambda: ops.sum_all(ops.hadamard(f(), c)), [x, w, b], points, rng=rng))


def _check_conv2d_wide(rng, points):
    # enough input channels to take the per-offset GEMM path
    x = _param(rng, 2, 9, 5, 5)
    w = _param(rng, 3, 9, 3, 3)
    b = _param(rng, 3)
    f = lambda: ops.conv2d(x, w, b, padding=(1, 1))
    c = _cotangent(f(), rng)
    return max(check_gradients(lambda: ops.sum_all(ops.hadamard(f(), c)), [x, w, b], points, rng=rng))


def _check_maxpool(rng, points):
    err = 0.0
    for kernel, stride in (((2, 2), None), ((3, 2), (1, 2))):
        err = max(err, _check_unary(lambda t: ops.maxpool2d(t, kernel, stride), (2, 2, 6, 6), rng, points))
    return err


def _check_batchnorm(rng, points):
    err = 0.0
    for training in (True, False):
        x = _param(rng, 4, 3, 2, 2)
        state = ops.BatchNormState.create(3, dtype=np.float64)
        state.gamma.data[:] = rng.normal(size=3)
        state.beta.data[:] = rng.normal(size=3)
        state.running_mean[:] = rng.normal(size=3)
        state.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        w = Tensor(rng.normal(size=x.shape), dtype=np.float64)
        f = lambda: ops.sum_all(ops.hadamard(ops.batchnorm(x, state, training), w))
        err = max(err, *check_gradients(f, [x, state.gamma, state.beta], points, rng=rng))
    return err


def _check_reduce_sum(rng, points):
    return max(_check_unary(lambda t: ops.reduce_sum(t, axis, keep), (2, 3, 4), rng, points) for axis in range(3) for keep in (False, True))


def _check_hadamard(rng, points):
    a = _param(rng, 2, 5, 4, 1)
    b = _param(rng, 2, 1, 4, 1)
    w = Tensor(rng.normal(size=(2, 5, 4, 1)), dtype=np.float64)
    return max(check_gradients(lambda: ops.sum_all(ops.hadamard(ops.hadamard(a, b), w)), [a, b], points, rng=rng))


def _check_divide(rng, points):
    a = _param(rng, 3, 4, 5)
    b = _param(rng, 3, 1, 5)
    b.data[...] = np.abs(b.data) + 0.5
    w = Tensor(rng.normal(size=(3, 4, 5)), dtype=np.float64)
    return max(check_gradients(lambda: ops.sum_all(ops.hadamard(ops.divide(a, b), w)), [a, b], points, rng=rng))


def _check_linear(rng, points):
    x = _param(rng, 3, 5)
    w = _param(rng, 4, 5)
    b = _param(rng, 4)
    c = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    return max(check_gradients(lambda: ops.sum_all(ops.hadamard(ops.linear(x, w, b), c)), [x, w, b], points, rng=rng))


def _check_dropout(rng, points):
    x = _param(rng, 4, 6)
    c = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    seed = int(rng.integers(2**31))
    f = lambda: ops.sum_all(ops.hadamard(ops.dropout(x, 0.3, True, np.random.default_rng(seed)), c))
    return max(check_gradients(f, [x], points, rng=rng))


def _check_cross_entropy(rng, points):
    logits = _param(rng, 5, 7, scale=2.0)
    labels = rng.integers(0, 7, size=5)
    return max(check_gradients(lambda: ops.softmax_cross_entropy(logits, labels), [logits], points, rng=rng))


OP_CHECKS: dict[str, Callable[[np.random.Generator, int], float]] = {
    "conv2d": _check_conv2d,
    "conv2d_wide": _check_conv2d_wide,
    "maxpool2d": _check_maxpool,
    "batchnorm": _check_batchnorm,
    "elu": lambda rng, n: _check_unary(ops.elu, (4, 6), rng, n),
    "relu": lambda rng, n: _check_unary(ops.relu, (4, 6), rng, n),
    "sigmoid": lambda rng, n: _check_unary(ops.sigmoid, (4, 6), rng, n),
    "reduce_sum": _check_reduce_sum,
    "hadamard": _check_hadamard,
    "divide": _check_divide,
    "linear": _check_linear,
    "dropout": _check_dropout,
    "softmax_cross_entropy": _check_cross_entropy,
}


def run_op_checks(names: Sequence[str] | None = None, points: int = 20, seed: int = 0) -> dict[str, float]:
    """Run the named op checks in 64-bit mode; returns worst error per op."""
    names = list(OP_CHECKS) if names is None else list(names)
    results = {}
    with default_dtype(np.float64):
        for name in names:
            results[name] = OP_CHECKS[name](np.random.default_rng(seed), points)
    return results
