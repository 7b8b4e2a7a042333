"""AdamW with linear warmup to a constant learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    warmup_steps: int = 800
    eps: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.kind != "adamw":
            raise ParameterError(f"unsupported optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        object.__setattr__(self, "betas", tuple(self.betas))

    def lr_at(self, step: int) -> float:
        """Learning rate for 0-based ``step``."""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)


class AdamW:
    def __init__(self, params: list[Tensor], cfg: OptimizerConfig) -> None:
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the pre-clip gradient norm."""
        cfg = self.cfg
        lr = cfg.lr_at(self.t)
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = 1.0
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        b1, b2 = cfg.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay and p.ndim >= 2:
                p.data = p.data * (1.0 - lr * cfg.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        return norm
