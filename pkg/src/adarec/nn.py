"""Parameter containers and helpers shared by teacher and student networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import PAD


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: list
    embedding: Tensor
    mask: np.ndarray


def padding_mask(ids: np.ndarray) -> np.ndarray:
    """(batch, time, 1) float mask that is 1 at real items."""
    return (np.asarray(ids) != PAD).astype(np.float64)[..., None]


def normal(rng: np.random.Generator, shape, std: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def constant(value, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=True, name=name)


class Model:
    """Holds named parameters in a fixed insertion order."""

    embedding_key = "item_embedding"

    def __init__(self):
        self.params: dict = {}

    def add(self, tensor: Tensor) -> Tensor:
        if tensor.name in self.params:
            raise KeyError(f"duplicate parameter {tensor.name}")
        self.params[tensor.name] = tensor
        return tensor

    def parameters(self) -> list:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def zero_padding_row(self) -> None:
        table = self.params[self.embedding_key]
        if table.data[PAD].any():
            data = table.data.copy()
            data[PAD] = 0.0
            table.data = data

    def state(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise KeyError(f"state does not match parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def logits(self, ids: np.ndarray) -> np.ndarray:
        return self.forward(ids).logits.data

    def forward(self, ids, rng=None) -> ForwardOutput:  # pragma: no cover - abstract
        raise NotImplementedError
