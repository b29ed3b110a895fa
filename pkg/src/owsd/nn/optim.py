"""ADAM with an exponential per-epoch learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import MissingGradientError
from .layers import Parameter


class Adam:
    """Bias-corrected ADAM.

    The effective step size is ``learning_rate * decay_rate ** epoch``;
    call :meth:`set_epoch` at the start of each epoch.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        learning_rate: float = 1e-3,
        decay_rate: float = 0.95,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.decay_rate = decay_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.step_count = 0
        self.epoch = 0

    @property
    def effective_lr(self) -> float:
        return self.learning_rate * self.decay_rate**self.epoch

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise MissingGradientError(f"parameter {i} {p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        lr = self.effective_lr
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
