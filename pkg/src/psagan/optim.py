"""Adam with decoupled weight decay and the switching two-time-scale schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np


class Adam:
    """Bias-corrected Adam; weight decay is applied as ``theta -= lr * wd * theta``."""

    def __init__(self, params: Sequence, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if len(missing) == len(self.params):
            raise RuntimeError("adam_step called without any populated gradients")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            # parameters outside the current graph (e.g. unused branches) see a zero gradient
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def set_lr(self, lr: float) -> None:
        self.lr = lr


def adam_step(params, grads, state: Adam) -> list:
    """Functional entry point: assign ``grads`` and advance ``state`` one step."""
    if grads is None or len(grads) != len(state.params):
        raise ValueError("a gradient is required for every parameter")
    for p, g in zip(state.params, grads):
        if g is None:
            raise ValueError("missing gradient")
        p.grad = np.asarray(g, dtype=p.data.dtype)
    state.step()
    return [p.data for p in state.params]


@dataclass(frozen=True)
class TturSchedule:
    """Generator/discriminator rates that swap once, then decay together."""

    lr_g0: float
    lr_d0: float
    switch_epoch: int
    decay_factor: float = 0.5
    decay_every: int = 10


TRANSLATOR_RATES = (0.005, 0.001)
SUPER_RESOLVER_RATES = (0.003, 0.001)


def ttur_rates(epoch: int, schedule: TturSchedule) -> Tuple[float, float]:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < schedule.switch_epoch:
        return schedule.lr_g0, schedule.lr_d0
    n_decays = (epoch - schedule.switch_epoch) // schedule.decay_every
    scale = schedule.decay_factor ** n_decays
    return schedule.lr_d0 * scale, schedule.lr_g0 * scale
