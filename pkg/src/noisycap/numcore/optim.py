"""AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class OptimizerState:
    base_lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "OptimizerState":
        st = cls(**hyper)
        st.first_moment = [np.zeros_like(p) for p in params]
        st.second_moment = [np.zeros_like(p) for p in params]
        return st


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
) -> tuple[Sequence[np.ndarray], OptimizerState]:
    """One AdamW update, in place on ``params`` and ``state``.

    Decay is decoupled and applied in the same step as the bias-corrected
    adaptive update: ``p <- p - lr*wd*p - lr*mhat/(sqrt(vhat)+eps)``.
    """
    if lr < 0:
        raise ValueError(f"adamw_step: lr must be >= 0, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("adamw_step: params, grads and moments differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ValueError(f"adamw_step: shape mismatch at param {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adamw_step: non-finite gradient at param {i}")

    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= (lr * state.weight_decay) * p + lr * step
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_fraction: float = 0.10

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("LrSchedule: total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("LrSchedule: warmup_fraction must be in [0, 1)")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp 0 -> base_lr over the warmup steps, then cosine decay to 0."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"lr_at: step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step <= w and w > 0:
        return schedule.base_lr * step / w
    span = schedule.total_steps - w
    progress = (step - w) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
