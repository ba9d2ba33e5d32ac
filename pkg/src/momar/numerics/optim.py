from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay.

    Defaults follow the generation-branch recipe (betas 0.9 / 0.99). Weight
    decay of 0.01 is our default, not a published value.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def step(self, grads: Mapping[str, np.ndarray] | None = None, lr: float | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(self.state, self.params, grads, self.lr if lr is None else lr,
                   self.beta1, self.beta2, self.eps, self.weight_decay)


def adamw_step(state: OptimizerState, params: Mapping[str, Tensor],
               grads: Mapping[str, np.ndarray], lr: float, beta1: float = 0.9,
               beta2: float = 0.99, eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for k, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: grad shape {g.shape} != param shape {params[k].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        p = params[k]
        m = state.m.setdefault(k, np.zeros_like(p.data))
        v = state.v.setdefault(k, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        data = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


class WarmupStepLR:
    """Linear warmup, then multiply by ``gamma`` at each milestone."""

    def __init__(self, base_lr: float, warmup: int = 0, milestones=(), gamma: float = 0.1):
        self.base_lr, self.warmup = base_lr, warmup
        self.milestones = sorted(milestones)
        self.gamma = gamma

    def __call__(self, step: int) -> float:
        lr = self.base_lr
        if self.warmup and step < self.warmup:
            lr *= (step + 1) / self.warmup
        for m in self.milestones:
            if step >= m:
                lr *= self.gamma
        return lr


class WarmupCosineLR:
    """Linear warmup then cosine decay to ``floor * base_lr`` at ``total`` steps."""

    def __init__(self, base_lr: float, total: int, warmup: int = 0, floor: float = 0.0):
        self.base_lr, self.total, self.warmup, self.floor = base_lr, total, warmup, floor

    def __call__(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.base_lr * (step + 1) / self.warmup
        span = max(1, self.total - self.warmup)
        u = min(1.0, (step - self.warmup) / span)
        return self.base_lr * (self.floor + (1 - self.floor) * 0.5 * (1 + math.cos(math.pi * u)))


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.999

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], decay: float = 0.999) -> "EmaState":
        return cls({k: p.data.copy() for k, p in params.items()}, decay)


def ema_update(state: EmaState, params: Mapping[str, Tensor]) -> EmaState:
    if not 0.0 <= state.decay <= 1.0:
        raise ValueError("EMA decay must lie in [0, 1]")
    d = state.decay
    for k, p in params.items():
        s = state.shadow[k]
        if s.shape != p.shape:
            raise ShapeError(f"EMA shadow {k} has shape {s.shape}, param {p.shape}")
        state.shadow[k] = d * s + (1.0 - d) * p.data
    return state
