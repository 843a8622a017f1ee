"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> Sequence[np.ndarray]:
    """Update ``params`` in place and return them.

    A ``None`` gradient is treated as zero. Raises ``ValueError`` when any
    parameter, gradient and accumulator disagree in shape.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} accumulators")
    for p, g, m in zip(params, grads, state.m):
        if m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"adam_step: shape mismatch param {p.shape}, grad "
                             f"{None if g is None else g.shape}, state {m.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Optimizer bound to a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState.for_params([p.data for p in self.params], lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
