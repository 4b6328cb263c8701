"""AdamW with decoupled weight decay and a warmup + cosine-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError


def lr_at_step(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then half-cycle cosine decay to zero.

    ``step`` counts completed updates, so the first update uses step 0 and
    the schedule reaches exactly zero at ``total_steps``.
    """
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if warmup_steps >= total_steps:
        raise ConfigError("warmup_steps must be smaller than total_steps")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of parameter tensors.

    Weight decay multiplies each parameter by (1 - lr*wd) before the Adam
    update; it never enters the moment estimates. Parameters listed in
    ``no_decay`` (gains, biases, single tokens) skip the decay term.
    """

    params: list[Tensor]
    base_lr: float
    warmup_steps: int
    total_steps: int
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    no_decay: frozenset[int] = frozenset()
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list)
    _v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return lr_at_step(self.step_count, self.base_lr, self.warmup_steps, self.total_steps)

    def step(self) -> float:
        """Apply one update from accumulated grads; returns the lr used."""
        lr = self.lr
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and id(p) not in self.no_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.step_count = t
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
