"""AdamW with a linear warmup/decay schedule and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float
    total_steps: int
    weight_decay: float = 1e-5
    epsilon: float = 1e-8
    warmup_steps: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(config: OptimizerConfig, step: int) -> float:
    """Learning rate for update number ``step`` (1-based)."""
    if step > config.total_steps:
        raise ValueError(f"step {step} beyond total_steps {config.total_steps}")
    decay_span = config.total_steps - config.warmup_steps
    decay = (config.total_steps - step) / decay_span if decay_span > 0 else 1.0
    if config.warmup_steps > 0:
        factor = min(step / config.warmup_steps, decay)
    else:
        factor = decay
    return config.learning_rate * max(factor, 0.0)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total**0.5
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class AdamW:
    params: list[Tensor]
    config: OptimizerConfig
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list, repr=False)
    _v: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        self.step_count += 1
        cfg = self.config
        if cfg.clip_norm is not None:
            clip_grad_norm(self.params, cfg.clip_norm)
        lr = lr_at(cfg, self.step_count)
        adamw_step(self.params, self._m, self._v, cfg, self.step_count, lr)
        return lr


def adamw_step(params, m_state, v_state, config: OptimizerConfig, step: int, lr: float | None = None):
    if lr is None:
        lr = lr_at(config, step)
    b1, b2 = config.betas
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for p, m, v in zip(params, m_state, v_state):
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
