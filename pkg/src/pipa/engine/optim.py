"""AdamW with decoupled weight decay and the warmup + polynomial-decay schedule."""
from __future__ import annotations

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


class AdamW:
    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, weight_decay: float = 0.0, grads: dict | None = None) -> None:
        """One update. Missing grads count as zero; any non-finite grad aborts
        before state changes."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {k}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def optimizer_step(params: dict, grads: dict, state: AdamW, lr_t: float, wd: float) -> None:
    state.step(lr_t, wd, grads)


def lr_schedule(it: int, lr: float, warmup_iters: int, total_iters: int,
                power: float = 1.0) -> float:
    """Linear ramp 0 -> lr over the warmup, then polynomial decay to 0 at ``total_iters``."""
    if it < warmup_iters:
        return lr * it / warmup_iters
    if total_iters <= warmup_iters:
        return lr
    frac = min(1.0, (it - warmup_iters) / (total_iters - warmup_iters))
    return lr * (1.0 - frac) ** power
