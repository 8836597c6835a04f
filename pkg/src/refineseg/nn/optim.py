from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    epochs: int = 1
    batch_size: int = 1
    lr_floor: float = 1e-6
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")
        if self.lr_floor < 0 or self.lr_floor > self.lr:
            raise ValueError("lr_floor must lie in [0, lr]")

    def to_dict(self):
        return asdict(self)


def cosine_lr(step: int, total: int, init: float, floor: float) -> float:
    if total <= 0:
        return init
    t = min(max(step, 0), total)
    return floor + 0.5 * (init - floor) * (1 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay and a cosine-annealed learning rate.

    Only the parameters handed to the constructor are ever updated.
    """

    def __init__(self, params, config: TrainConfig, total_steps: int):
        self.params = list(params)
        self.config = config
        self.total_steps = total_steps
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        c = self.config
        return cosine_lr(step, self.total_steps, c.lr, c.lr_floor)

    def step(self):
        c = self.config
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - c.beta1 ** t
        bc2 = 1 - c.beta2 ** t
        for p in self.params:
            dt = p.value.dtype
            if c.weight_decay:
                p.value *= dt.type(1 - lr * c.weight_decay)
            p.m *= dt.type(c.beta1)
            p.m += dt.type(1 - c.beta1) * p.grad
            p.v *= dt.type(c.beta2)
            p.v += dt.type(1 - c.beta2) * p.grad * p.grad
            denom = np.sqrt(p.v / dt.type(bc2)) + dt.type(c.eps)
            p.value -= dt.type(lr / bc1) * p.m / denom
            p.grad[...] = 0
        return lr
