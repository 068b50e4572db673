"""AdamW with a linear warm-up / cosine-decay learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def cosine_lr(step: int, total: int, cfg: OptimizerConfig) -> float:
    if total <= 0:
        return cfg.lr
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(total - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params: list[Tensor], cfg: OptimizerConfig, decay: bool = True):
        self.params = params
        self.cfg = cfg
        self.decay = decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            if self.decay and c.weight_decay and p.ndim > 1:
                p.data -= lr * c.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
