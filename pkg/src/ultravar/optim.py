"""Adaptive-moment optimizer with decoupled weight decay and cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class AdamW:
    """AdamW over a fixed list of (name, Tensor) parameters.

    Update order follows the parameter list, so repeated runs are
    bit-deterministic.  ``step`` consumes and clears gradients.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params: list[tuple[str, Tensor]] = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update + self.lr * self.weight_decay * p.data
                       ).astype(np.float32)
            p.grad = None

    def reset_state_rows(self, name: str, rows) -> None:
        """Clear first/second moments for selected rows (codebook re-seeding)."""
        self._m[name][rows] = 0.0
        self._v[name][rows] = 0.0


def cosine_lr(epoch: int, total_epochs: int, base_lr: float,
              floor: float = 1e-5) -> float:
    """Cosine annealing from ``base_lr`` (epoch 0) down to ``floor`` (last)."""
    if total_epochs <= 1:
        return base_lr
    frac = epoch / (total_epochs - 1)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * frac))
