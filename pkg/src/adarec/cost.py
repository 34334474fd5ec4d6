"""Parameter and FLOP counts of candidate operations and the efficiency penalty.

Counting conventions: a multiply-add is 2 FLOPs, a pooling comparison or
addition is 1. Bias additions are not counted. Normalised columns divide by the
largest entry over the candidate set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .search_space import OPS, ArchParams, DiscreteCell, derive_architecture, kernel_size, sample_edges


def op_param_count(kind: str, d: int) -> int:
    if d < 1:
        raise ValueError("d must be >= 1")
    if kind not in OPS:
        raise ValueError(f"unknown operation {kind!r}")
    if "cnn" in kind:
        return kernel_size(kind) * d * d + d
    return 0


def op_flops(kind: str, d: int, t: int) -> int:
    if d < 1 or t < 1:
        raise ValueError("d and t must be >= 1")
    if kind not in OPS:
        raise ValueError(f"unknown operation {kind!r}")
    if "cnn" in kind:
        return 2 * kernel_size(kind) * d * d * t
    if "pool" in kind:
        return kernel_size(kind) * d * t
    return 0


@dataclass
class CostTable:
    d: int
    t: int
    params: np.ndarray
    flops: np.ndarray

    @classmethod
    def build(cls, d: int, t: int) -> "CostTable":
        return cls(d, t,
                   np.array([op_param_count(op, d) for op in OPS], dtype=np.int64),
                   np.array([op_flops(op, d, t) for op in OPS], dtype=np.int64))

    @property
    def size_norm(self) -> np.ndarray:
        return self.params / self.params.max()

    @property
    def flops_norm(self) -> np.ndarray:
        return self.flops / self.flops.max()

    @property
    def combined(self) -> np.ndarray:
        """Per-op normalised size + FLOPs."""
        return self.size_norm + self.flops_norm

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "t": self.t,
            "conventions": {"multiply_add_flops": 2, "pool_op_flops": 1, "bias_counted": False,
                            "normalisation": "divide by candidate-set maximum"},
            "ops": {op: {"params": int(p), "flops": int(f), "size_norm": float(sn), "flops_norm": float(fn)}
                    for op, p, f, sn, fn in zip(OPS, self.params, self.flops, self.size_norm, self.flops_norm)},
        }

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")


def efficiency_loss(arch, table: CostTable, tau: Optional[float] = None,
                    rng: Optional[np.random.Generator] = None, mode: str = "soft",
                    ys: Optional[list] = None) -> Tensor:
    """Sum over edges of normalised size + FLOPs.

    In ``soft`` and ``straight_through`` modes each edge contributes the cost
    expected under its relaxed sample (pass the forward pass's ``ys`` to share
    the sample); ``discrete`` sums the chosen operations exactly.
    """
    c = table.combined
    if mode == "discrete":
        cell = arch if isinstance(arch, DiscreteCell) else derive_architecture(arch)
        return Tensor(np.asarray(float(np.sum([c[OPS.index(op)] for op in cell.ops]))))
    if mode not in ("soft", "straight_through"):
        raise ValueError(f"unknown mode {mode!r}")
    if ys is None:
        if tau is None or rng is None:
            raise ValueError("need tau and rng, or a sample ys")
        ys = sample_edges(arch, tau, rng)
    terms = [ad.sum(ad.mul(y, c)) for y in ys]
    return ad.sum(ad.stack(terms))


def cell_cost(cell: DiscreteCell, table: CostTable) -> float:
    """Normalised size + FLOPs of a discrete cell (the discrete efficiency loss)."""
    return float(efficiency_loss(cell, table, mode="discrete").data)


def cell_totals(cell: DiscreteCell, d: int, t: int, k_blocks: int) -> dict:
    """Raw parameter and FLOP totals of the operations in ``k_blocks`` stacked cells."""
    params = sum(op_param_count(op, d) for op in cell.ops)
    flops = sum(op_flops(op, d, t) for op in cell.ops)
    return {"params": params * k_blocks, "flops": flops * k_blocks}


def uniform_arch(m: int = 3) -> ArchParams:
    return ArchParams.uniform(m)
