"""AdamW with decoupled weight decay, and a cosine-with-warmup LR schedule."""

from __future__ import annotations

import math
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor

__all__ = ["AdamW", "MissingGradError", "cosine_lr"]


class MissingGradError(ValueError):
    """An optimizer step found a parameter whose gradient is absent."""


class AdamW:
    """Bias-corrected Adam with weight decay applied directly to parameters.

    Update per parameter::

        m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
        p <- p - lr * ( (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps) + wd * p )

    Steps are exclusive (single writer) and bitwise deterministic for
    identical inputs.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = dict(params)
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {betas}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.exp_avg = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.exp_avg_sq = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter '{name}' has no gradient")
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def cosine_lr(step: int, warmup_steps: int, total_steps: int, peak: float, floor: float = 0.0) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay peak -> floor.

    Valid for 0 <= step <= total_steps with warmup_steps < total_steps.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps >= total_steps:
        raise ValueError(f"warmup_steps {warmup_steps} must be < total_steps {total_steps}")
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))
