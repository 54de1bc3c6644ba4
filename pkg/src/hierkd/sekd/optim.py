"""AdamW, cosine learning-rate schedule with linear warmup, and global-norm clipping."""

from __future__ import annotations

import math
from typing import Dict, Optional, Tuple

import numpy as np


class AdamW:
    """Adam with decoupled weight decay, updating the given arrays in place."""

    def __init__(
        self,
        params: Dict[str, np.ndarray],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bias1 = 1.0 - self.beta1**self.t
        bias2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p -= lr * (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float = 0.0) -> float:
    """Learning rate for a 0-based step: linear warmup then cosine decay to zero."""
    warmup = int(math.ceil(warmup_ratio * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    """Scale gradients in place so their joint norm is at most max_norm. Returns the norm before clipping."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm
