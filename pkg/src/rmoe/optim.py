"""Optimizers over Tensor leaves: AdamW (decoupled weight decay) and plain SGD.

The elementwise update arithmetic lives in the kernel backends so a training
step is reproducible bit-for-bit under either backend.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError
from .tensor import Tensor


class OptimizerState:
    """First/second moment arrays per parameter plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.state = OptimizerState(self.params)

    def step(self):
        self.state.step_count += 1
        t = self.state.step_count
        for p, m, v in zip(self.params, self.state.m, self.state.v):
            if p.grad is None:
                raise ContractError(f"adamw_step: parameter {p.name!r} has no grad")
            g = np.ascontiguousarray(p.grad, dtype=np.float32).reshape(-1)
            K.adamw_step(p.data.reshape(-1), g, m.reshape(-1), v.reshape(-1),
                         t, self.lr, self.beta1, self.beta2, self.eps,
                         self.weight_decay)


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"sgd_step: parameter {p.name!r} has no grad")
            g = np.ascontiguousarray(p.grad, dtype=np.float32).reshape(-1)
            K.sgd_step(p.data.reshape(-1), g, self.lr)


def cosine_lr(base_lr: float, step: int, total_steps: int, min_lr: float = 0.0) -> float:
    """Cosine decay from base_lr to min_lr over total_steps (step is 0-based)."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
