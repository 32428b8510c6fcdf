from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Parameter


@dataclass
class TrainConfig:
    total_epochs: int = 10
    base_lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be positive, got {self.total_epochs}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def cosine_lr(config: TrainConfig, epoch: int) -> float:
    """``base_lr * 0.5 * (1 + cos(pi * epoch / total_epochs))``, clamped at the endpoint."""
    e = min(max(epoch, 0), config.total_epochs)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * e / config.total_epochs))


class SGD:
    """Heavy-ball SGD: ``v = momentum * v + g``; ``w -= lr * v``; grads reset."""

    def __init__(self, params: list[Parameter], config: TrainConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, epoch: int):
        lr = cosine_lr(self.config, epoch)
        if epoch >= self.config.total_epochs:
            lr = 0.0
        lr32 = np.float32(lr)
        mom = np.float32(self.config.momentum)
        for p, v in zip(self.params, self.velocity):
            v *= mom
            v += p.grad
            if lr32:
                p.data = p.data - lr32 * v
            p.zero_grad()


def sgd_step(params: list[Parameter], config: TrainConfig, epoch: int, optimizer: SGD | None = None) -> SGD:
    """One SGD update; returns the optimizer so momentum buffers can be reused."""
    optimizer = optimizer if optimizer is not None else SGD(params, config)
    optimizer.step(epoch)
    return optimizer
