"""Adam with an exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from .tensor import Parameter


@dataclass(frozen=True)
class ExponentialDecay:
    """lr(t) = initial * (final / initial) ** (min(t, decay_steps) / decay_steps)."""

    initial: float = 1e-4
    final: float = 1e-5
    decay_steps: int = 50_000

    def __call__(self, step: int) -> float:
        if self.initial == 0.0:
            return 0.0
        frac = min(step, self.decay_steps) / self.decay_steps
        return self.initial * (self.final / self.initial) ** frac


@dataclass
class Adam:
    schedule: ExponentialDecay = field(default_factory=ExponentialDecay)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Iterable[Parameter], grads: Dict[str, np.ndarray]) -> float:
        """Apply one update in place and return the learning rate used."""
        params = list(params)
        for p in params:
            if p.name not in grads:
                raise KeyError(f"missing gradient for parameter {p.name!r}")
        lr = self.schedule(self.step)
        self.step += 1
        t = self.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            g = grads[p.name]
            m = self.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)
            v = self.v[p.name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[p.name], self.v[p.name] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


def adam_update(params, grads, optimizer: Adam) -> float:
    return optimizer.update(params, grads)
