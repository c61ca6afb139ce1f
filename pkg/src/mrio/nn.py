"""Parameter containers shared by the matching and occupancy networks."""

from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


class Module:
    """Named parameters grouped into ordered layers.

    ``layers`` lists ``(layer_name, [param names])`` from input to output;
    freezing and adaptation work at layer granularity.
    """

    prefix = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.layers: list[tuple[str, list[str]]] = []
        self.frozen: set[str] = set()

    def add_layer(self, name: str, **tensors: np.ndarray) -> None:
        names = []
        for k, v in tensors.items():
            full = f"{self.prefix}{name}.{k}"
            self.params[full] = Tensor(v, requires_grad=True, name=full)
            names.append(full)
        self.layers.append((name, names))

    def p(self, layer: str, key: str) -> Tensor:
        return self.params[f"{self.prefix}{layer}.{key}"]

    def trainable(self) -> list[Tensor]:
        return [t for n, t in self.params.items() if n not in self.frozen]

    def freeze_all_but_last(self, k: int = 2) -> None:
        self.frozen = {n for _, names in self.layers[:-k] for n in names} if k else set(self.params)

    def layer_params(self, names) -> list[Tensor]:
        out = []
        for layer, pnames in self.layers:
            if layer in names:
                out += [self.params[n] for n in pnames]
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks {sorted(missing)[:3]}")
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ContractError(f"{n}: shape {state[n].shape} != {t.shape}")
            t.data = np.array(state[n], dtype=np.float64)

    def clone(self):
        return copy.deepcopy(self)


def he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


def dense(x, W: Tensor, b: Tensor, act: bool = True) -> Tensor:
    y = T.matmul(x, W) + b
    return T.relu(y) if act else y
