"""Decoupled-weight-decay adaptive-moment optimizer and the one-cycle
learning-rate profile used for training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> dict:
    """One update; returns new parameter arrays and advances the state in place."""
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        out[k] = p - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return out


def one_cycle_lr(
    step: int,
    total_steps: int,
    peak_lr: float = 1e-3,
    warmup_frac: float = 0.3,
    start_div: float = 25.0,
    final_div: float = 1000.0,
) -> float:
    """Linear warmup from peak/start_div to the peak at ``warmup_frac`` of the
    run, then cosine decay down to peak/final_div at the last step."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    s = min(max(step, 0), total_steps)
    warm = warmup_frac * total_steps
    lo = peak_lr / start_div
    if warm > 0 and s <= warm:
        return lo + (peak_lr - lo) * (s / warm)
    floor = peak_lr / final_div
    span = max(total_steps - warm, 1e-12)
    frac = (s - warm) / span
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
