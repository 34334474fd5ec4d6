"""AdamW with decoupled weight decay over :class:`~adarec.autodiff.Tensor` leaves."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 post_step: Optional[Callable[[], None]] = None):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.post_step = post_step
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: dict) -> None:
        """Apply one update; parameters absent from ``grads`` see a zero gradient."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)
        if self.post_step is not None:
            self.post_step()
