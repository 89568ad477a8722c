"""Adam with decoupled weight decay, global-norm clipping, and the
warmup + polynomial-decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], beta1=0.9, beta2=0.98, eps=1e-6) -> "AdamState":
        state = cls(beta1, beta2, eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decay: Optional[Iterable[str]] = None,
) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled (applied as ``p -= lr * wd * p``) and only hits
    the names in ``decay``; every parameter is decayed when ``decay`` is None.
    A missing gradient is treated as zero.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    decay = set(params) if decay is None else set(decay)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr = float(lr)
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} does not match parameter {name} {p.shape}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if weight_decay and name in decay:
            update = update + weight_decay * p.data
        p.data -= lr * update


def global_norm(grads: Iterable[Optional[np.ndarray]]) -> float:
    total = 0.0
    for g in grads:
        if g is not None:
            g64 = g.astype(np.float64, copy=False)
            total += float(np.dot(g64.ravel(), g64.ravel()))
    return math.sqrt(total)


def clip_global_norm(grads: Iterable[Optional[np.ndarray]], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    grads = [g for g in grads if g is not None]
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    end_lr: float = 0.0
    power: float = 1.0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be positive")
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")
        if self.peak_lr < 0 or self.end_lr < 0:
            raise ValueError("learning rates must be non-negative")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0 to peak, then polynomial decay to ``end_lr``."""
    if step <= 0:
        return 0.0
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if step >= schedule.total_steps:
        return schedule.end_lr
    remaining = 1.0 - (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return (schedule.peak_lr - schedule.end_lr) * remaining**schedule.power + schedule.end_lr
