"""SGD with Nesterov momentum, polynomial learning-rate decay and global-norm clipping."""
from __future__ import annotations

import numpy as np


def poly_lr(base_lr: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return base_lr
    return base_lr * (1 - min(step, total) / total) ** power


class SGD:
    """``buf = mu*buf + g; p -= lr*(g + mu*buf)`` with ``g`` including weight decay."""

    def __init__(self, params, lr=1e-2, momentum=0.99, weight_decay=3e-5, nesterov=True, clip_norm=12.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.clip_norm = clip_norm
        self._bufs = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in self.params if p.grad is not None)))

    def step(self, lr: float | None = None) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        lr = self.lr if lr is None else lr
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-6)
        mu = self.momentum
        for p, buf in zip(self.params, self._bufs):
            if p.grad is None:
                continue
            g = p.grad * p.dtype.type(scale)
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            buf *= p.dtype.type(mu)
            buf += g
            update = g + p.dtype.type(mu) * buf if self.nesterov else buf
            p.data = p.data - p.dtype.type(lr) * update
        return norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None
