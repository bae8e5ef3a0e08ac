"""Adam with an externally controlled learning rate, shared by training and mask search."""
from __future__ import annotations

from typing import List, Sequence

import numpy as np


class Adam:
    """Adam over a list of numpy arrays, updated in place.

    ``beta1``/``beta2`` default to (0.9, 0.999) and ``eps`` to 1e-8.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params: List[np.ndarray] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def linear_decay(base_lr: float, step: int, total: int) -> float:
    """Learning rate for 0-based ``step`` decaying linearly from ``base_lr`` to 0."""
    return base_lr * max(0.0, 1.0 - step / total)
