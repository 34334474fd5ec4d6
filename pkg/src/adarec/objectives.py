"""Training objectives shared by the teacher and student loops."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD


class TrainingDiverged(FloatingPointError):
    """A loss or gradient became non-finite; carries where it happened."""

    def __init__(self, phase: str, epoch: int, step: int, detail: str = "",
                 components: Optional[dict] = None):
        self.phase, self.epoch, self.step = phase, epoch, step
        self.components = components or {}
        parts = f"{phase} diverged at epoch {epoch}, step {step}"
        if detail:
            parts += f": {detail}"
        if self.components:
            parts += " | " + ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(parts)


def autoregressive_targets(ids: np.ndarray) -> tuple:
    """Targets shifted one step left, and the (batch, time) mask of scored positions.

    Position i is scored when both x_i and x_{i+1} are real items.
    """
    ids = np.asarray(ids)
    targets = np.zeros_like(ids)
    targets[:, :-1] = ids[:, 1:]
    mask = (ids != PAD) & (targets != PAD)
    return targets, mask.astype(np.float64)


def ce_loss(probs: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None,
            floor: float = ad.PROB_FLOOR) -> Tensor:
    """Mean negative log-probability of ``targets`` over unmasked positions."""
    targets = np.asarray(targets)
    if probs.shape[:-1] != targets.shape:
        raise ad.ShapeError(f"ce_loss: shape mismatch {probs.shape} vs {targets.shape}")
    if mask is None:
        mask = (targets != PAD).astype(np.float64)
    n = float(np.sum(mask))
    if n <= 0:
        raise ValueError("ce_loss: no unmasked positions")
    pick = np.zeros(probs.shape)
    np.put_along_axis(pick, targets[..., None], 1.0, axis=-1)
    pick *= np.asarray(mask, dtype=np.float64)[..., None]
    return ad.scale(ad.sum(ad.mul(ad.log(probs, floor=floor), pick)), -1.0 / n)


def total_loss(ce, kd, eff, gamma: float, beta: float):
    """(1 - gamma) * ce + gamma * kd + beta * eff; works on floats and tensors."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return (1.0 - gamma) * ce + gamma * kd + beta * eff


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]

