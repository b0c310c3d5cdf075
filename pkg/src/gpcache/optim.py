"""Minimal SGD with momentum, decoupled from any autograd framework."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine annealing from ``base_lr`` at step 0 down to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class SGD:
    """Heavy-ball SGD: ``v = mu*v + (g + wd*p)``; ``p -= lr*v``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: np.ndarray | None = None

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        g = grad + self.weight_decay * param if self.weight_decay else grad
        if self._velocity is None:
            self._velocity = np.array(g, dtype=np.float64, copy=True)
        else:
            self._velocity = self.momentum * self._velocity + g
        return param - lr * self._velocity
