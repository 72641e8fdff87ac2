"""Adam optimizer over Param objects."""
from __future__ import annotations

import numpy as np

from .graph import Param

__all__ = ["Adam", "adam_step"]


class Adam:
    def __init__(self, params: list[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self) -> None:
        self.t += 1
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.t)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0


def adam_step(params: list[Param], lr: float, beta1: float, beta2: float,
              eps: float, t: int) -> None:
    """Standard bias-corrected Adam update; gradients are zeroed afterwards."""
    if t < 1:
        raise ValueError("step count t must be >= 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.m[...] = beta1 * p.m + (1.0 - beta1) * g
        p.v[...] = beta2 * p.v + (1.0 - beta2) * g * g
        mhat = p.m / bc1
        vhat = p.v / bc2
        p.value -= lr * mhat / (np.sqrt(vhat) + eps)
        p.grad[...] = 0.0
