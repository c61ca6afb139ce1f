"""SGD and Adam with step-decay learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    decay_factor: float = 1.0
    decay_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay factor must lie in (0, 1]")

    def current_lr(self) -> float:
        if self.decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.decay_factor ** (self.step_count // self.decay_every)


def optimizer_step(state: OptimizerState, params: Sequence[Tensor], grads: dict) -> None:
    """Update ``params`` in place from ``grads`` and advance the schedule."""
    missing = [p for p in params if p not in grads]
    if missing:
        raise ContractError(f"no gradient for {len(missing)} parameter(s)")
    lr = state.current_lr()
    state.step_count += 1
    t = state.step_count
    for p in params:
        g = grads[p]
        if state.kind == "sgd":
            p.data = p.data - lr * g
            continue
        m, v = state.moments.get(id(p), (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.moments[id(p)] = (m, v)
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
