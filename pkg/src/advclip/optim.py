"""SGD with momentum and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor


@dataclass
class ScheduleConfig:
    base_lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 8
    warmup_epochs: int = 1
    seed: int = 17
    log_every: int = 5


def lr_at(step: int, total_steps: int, cfg: ScheduleConfig, warmup_steps: int | None = None) -> float:
    """Linear 0 -> base_lr over the warmup, then half-cosine down to 0 at ``total_steps``."""
    if warmup_steps is None:
        warmup_steps = total_steps * cfg.warmup_epochs // max(cfg.epochs, 1)
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.base_lr * step / warmup_steps
    rest = total_steps - warmup_steps
    if rest <= 0:
        return cfg.base_lr
    progress = min(max((step - warmup_steps) / rest, 0.0), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """v <- momentum*v + grad + wd*param;  param <- param - lr*v."""

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step(self.params, grads, self.velocity, lr, self.momentum, self.weight_decay)


def sgd_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g + weight_decay * p.data
        p.data = p.data - lr * v
    return params


class Adam:
    """Plain Adam; used only for from-scratch pretraining of the toy models."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
