"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mcta.autograd.tensor import Tensor
from mcta.errors import DimensionError, TapeStateError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data), **hyper)


def adam_step(params: Sequence[Tensor], states: Sequence[AdamState], lr: float) -> None:
    """Apply one Adam update to every parameter, then clear its gradient.

    All gradients are validated before any parameter is touched, so a
    missing gradient leaves the whole set unchanged.
    """
    if len(params) != len(states):
        raise DimensionError(f"adam_step: {len(params)} params but {len(states)} states")
    for i, (p, s) in enumerate(zip(params, states)):
        if p.grad is None:
            raise TapeStateError(f"adam_step: parameter {p.name or i} has no gradient")
        if s.m.shape != p.shape or s.v.shape != p.shape:
            raise DimensionError(f"adam_step: state for {p.name or i} has shape {s.m.shape}, param {p.shape}")
    for p, s in zip(params, states):
        g = p.grad
        s.step += 1
        s.m *= s.beta1
        s.m += (1 - s.beta1) * g
        s.v *= s.beta2
        s.v += (1 - s.beta2) * g * g
        m_hat = s.m / (1 - s.beta1**s.step)
        v_hat = s.v / (1 - s.beta2**s.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype, copy=False)
        p.grad = None


@dataclass
class Adam:
    """Convenience owner of one :class:`AdamState` per parameter."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [AdamState.like(p, beta1=self.beta1, beta2=self.beta2, eps=self.eps) for p in self.params]

    def step(self) -> None:
        adam_step(self.params, self.states, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
