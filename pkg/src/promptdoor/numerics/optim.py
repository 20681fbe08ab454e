"""Plain SGD with a fixed or warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class SgdConfig:
    """Learning-rate schedule, counted in iterations.

    ``warmup_epochs`` and ``total_epochs`` are converted to iterations with
    ``iters_per_epoch``. During warm-up the rate climbs linearly from 0 to
    the peak; afterwards it follows half a cosine period down to 0.
    """

    learning_rate: float
    schedule: str = "fixed"
    warmup_epochs: int = 0
    total_epochs: int = 1
    iters_per_epoch: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.schedule not in ("fixed", "warmup_cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.total_epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("total_epochs and iters_per_epoch must be >= 1")
        if self.warmup_epochs < 0 or (self.schedule == "warmup_cosine" and self.warmup_epochs >= self.total_epochs):
            raise ValueError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs} and {self.total_epochs}"
            )

    @property
    def total_iters(self) -> int:
        return self.total_epochs * self.iters_per_epoch

    def lr(self, iteration: int) -> float:
        """Learning rate for 0-based ``iteration``."""
        peak = self.learning_rate
        if self.schedule == "fixed":
            return peak
        warm = self.warmup_epochs * self.iters_per_epoch
        if iteration < warm:
            return peak * iteration / warm
        span = self.total_iters - warm
        pos = min(iteration - warm + 1, span)
        return peak * 0.5 * (1.0 + math.cos(math.pi * pos / span))


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], config: SgdConfig, iteration: int) -> float:
    """In-place ``p <- p - lr * g``; returns the rate used.

    A ``None`` gradient leaves its parameter alone. All gradients are checked
    before any parameter is touched, so a NaN aborts without a partial update.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            name = p.name or f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient for parameter {name} at iteration {iteration}")
    lr = config.lr(iteration)
    for p, g in zip(params, grads):
        if g is not None:
            p.data -= p.dtype.type(lr) * g
    return lr


class Adam:
    """Adam with bias correction.

    Used for victim pre-training and the defense-side optimisations; the attack
    itself runs plain SGD.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {p.name} at step {self.t}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
