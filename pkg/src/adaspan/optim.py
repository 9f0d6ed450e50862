"""RMSProp (IMPALA flavor), piecewise-constant cosine schedule, gradient clipping."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class RMSProp:
    """Root-mean-square propagation without momentum.

        m <- decay * m + (1 - decay) * g^2
        p <- p - lr * g / (sqrt(m) + eps)        (eps outside the root)

    ``eps_in_sqrt`` switches the denominator to sqrt(m + eps) for comparison
    with implementations that place epsilon inside. ``lr_scales`` optionally
    multiplies the learning rate for named parameters (used to let span
    parameters move faster than the network weights).
    """

    def __init__(self, params: dict[str, Tensor], lr: float, decay: float = 0.99,
                 eps: float = 0.01, momentum: float = 0.0, weight_decay: float = 0.0,
                 eps_in_sqrt: bool = False, lr_scales: dict[str, float] | None = None):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {decay}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.params = dict(params)
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eps_in_sqrt = eps_in_sqrt
        self.lr_scales = dict(lr_scales or {})
        self.square_avg = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.momentum_buf = ({k: np.zeros_like(p.data) for k, p in self.params.items()}
                             if momentum > 0.0 else {})

    def step(self, lr: float | None = None) -> None:
        """Apply one update from the accumulated gradients (grad None = skip)."""
        base = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay > 0.0:
                g = g + self.weight_decay * p.data
            m = self.square_avg[name]
            m *= self.decay
            m += (1.0 - self.decay) * g * g
            if self.eps_in_sqrt:
                denom = np.sqrt(m + self.eps)
            else:
                denom = np.sqrt(m) + self.eps
            update = g / denom
            if self.momentum > 0.0:
                buf = self.momentum_buf[name]
                buf *= self.momentum
                buf += update
                update = buf
            p.data -= base * self.lr_scales.get(name, 1.0) * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Optimizer state for checkpointing, keyed by parameter name."""
        out = {f"square_avg.{k}": v for k, v in self.square_avg.items()}
        out.update({f"momentum.{k}": v for k, v in self.momentum_buf.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.square_avg.items():
            src = arrays[f"square_avg.{k}"]
            if src.shape != v.shape:
                raise ValueError(f"optimizer state shape mismatch for {k}: {src.shape} vs {v.shape}")
            v[...] = src
        for k, v in self.momentum_buf.items():
            v[...] = arrays[f"momentum.{k}"]


def cosine_schedule(step: int, base_lr: float, total_steps: int,
                    update_every: int = 10000, min_lr: float = 0.0,
                    warmup_steps: int = 0) -> float:
    """Piecewise-constant cosine decay: the learning rate changes only every
    ``update_every`` steps, starting exactly at ``base_lr`` and ending exactly
    at ``min_lr`` once ``total_steps`` is reached."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if step >= total_steps:
        return min_lr
    progress = (step // update_every) * update_every / total_steps
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm_clip(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm
