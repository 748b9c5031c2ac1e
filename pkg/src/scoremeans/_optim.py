"""Small optimizer utilities shared by training and estimation."""

from __future__ import annotations

import math

import numpy as np


def warmup_cosine(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup from 0 to ``base_lr`` over ``warmup`` steps, then cosine to 0 at ``total``."""
    if step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    frac = min(1.0, (step - warmup) / (total - warmup))
    return 0.5 * base_lr * (1 + math.cos(math.pi * frac))


class Adam:
    """ADAM with bias correction over a list of arrays.

    ``step`` returns the update to add (ascent or descent is the caller's
    sign choice).
    """

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.k = 0

    def reset(self):
        for a in self.m + self.v:
            a[...] = 0.0
        self.k = 0

    def step(self, grads, lr):
        self.k += 1
        c1 = 1 - self.beta1**self.k
        c2 = 1 - self.beta2**self.k
        out = []
        for m, v, g in zip(self.m, self.v, grads):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.append(lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out
