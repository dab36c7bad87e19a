"""Adam with a stepwise learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np

from tagstrain.errors import DomainError, ShapeError
from tagstrain.nn.engine import Tensor

SQRT_HALF = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class StepSchedule:
    """lr(epoch) = base_lr * decay_factor ** n, n = decay events completed by ``epoch``.

    Decay events happen at epochs start_epoch + period, start_epoch + 2*period, ...
    """

    base_lr: float = 1e-3
    decay_factor: float = SQRT_HALF
    period_epochs: int = 5
    start_epoch: int = 10

    def __post_init__(self) -> None:
        if self.base_lr <= 0:
            raise DomainError(f"base_lr must be positive, got {self.base_lr}")
        if self.period_epochs < 1:
            raise DomainError(f"period_epochs must be >= 1, got {self.period_epochs}")
        if not 0 < self.decay_factor <= 1:
            raise DomainError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")

    def decay_events(self, epoch: int) -> int:
        return max(0, (epoch - self.start_epoch) // self.period_epochs)

    def lr(self, epoch: int) -> float:
        return self.base_lr * self.decay_factor ** self.decay_events(epoch)


LOCALIZER_SCHEDULE = StepSchedule(base_lr=1e-3, period_epochs=5, start_epoch=10)
TRACKER_SCHEDULE = StepSchedule(base_lr=1e-4, period_epochs=10, start_epoch=0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    m: Sequence[np.ndarray],
    v: Sequence[np.ndarray],
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place; ``step`` counts from 1."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= (lr * (mi / c1) / (np.sqrt(vi / c2) + eps)).astype(p.dtype)


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        schedule: StepSchedule,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params: List[Tensor] = list(params)
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, epoch: int) -> float:
        self.step_count += 1
        lr = self.schedule.lr(epoch)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step(
            [p.data for p in self.params], grads, self.m, self.v,
            self.step_count, lr, self.beta1, self.beta2, self.eps,
        )
        return lr

    def state_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step_count,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "schedule": {
                "base_lr": self.schedule.base_lr,
                "decay_factor": self.schedule.decay_factor,
                "period_epochs": self.schedule.period_epochs,
                "start_epoch": self.schedule.start_epoch,
            },
        }
