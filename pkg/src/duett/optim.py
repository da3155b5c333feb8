"""AdamW with decoupled weight decay and a warmup/inverse-sqrt schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params: list[Tensor], grads: list[np.ndarray], state: OptState, lr: float) -> OptState:
    """One AdamW update, in place on ``params``; returns the advanced state.

    Weight decay is applied first as ``p <- p - lr*wd*p``, then the
    bias-corrected Adam step.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match parameters")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m, v
        data = p.data
        if state.weight_decay:
            data = data - lr * state.weight_decay * data
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (data - lr * update).astype(p.data.dtype)
    return state


@dataclass(frozen=True)
class LrSchedule:
    peak_rate: float
    warmup_steps: int

    def __post_init__(self):
        if self.peak_rate <= 0 or self.warmup_steps <= 0:
            raise ValueError("peak_rate and warmup_steps must be positive")


def lr_at(step: int, sched: LrSchedule) -> float:
    """Linear warmup to the peak, then decay proportional to 1/sqrt(step)."""
    w = sched.warmup_steps
    if step <= w:
        return sched.peak_rate * step / w
    return sched.peak_rate * math.sqrt(w / step)
