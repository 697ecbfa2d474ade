"""Adam with a warmup-then-linear-decay learning rate."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ParamSet


@dataclass(frozen=True)
class LinearSchedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    final_frac: float = 0.0

    def __call__(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        frac = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return self.base_lr * (1.0 - (1.0 - self.final_frac) * frac)


class Adam:
    """Adam over the trainable tensors of a ParamSet.

    ``step(maximize=True)`` ascends, which is what the policy objective wants.
    """

    def __init__(self, params: ParamSet, schedule, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.schedule = schedule if callable(schedule) else (lambda _s, lr=float(schedule): lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    @property
    def lr(self) -> float:
        return self.schedule(self.t)

    def step(self, maximize: bool = False) -> float:
        lr = self.schedule(self.t)
        self.t += 1
        if lr == 0.0:
            return lr
        sign = -1.0 if maximize else 1.0
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.trainable():
            g = sign * p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.params.version += 1
        return lr

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()}, "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
