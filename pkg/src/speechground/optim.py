"""AdamW with linear warm-up, restricted to trainable parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ParamStore


class OptimizerError(RuntimeError):
    pass


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def warmup_factor(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, step / warmup_steps)


def adamw_step(
    params: ParamStore,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    warmup_steps: int = 0,
) -> float:
    """One in-place AdamW update of every trainable entry; returns the applied rate.

    A non-finite gradient rejects the whole step before anything is modified.
    """
    names = params.trainable_names()
    for n in names:
        if not np.all(np.isfinite(params.grad(n))):
            raise OptimizerError(f"non-finite gradient for {n}")
    state.step += 1
    t = state.step
    rate = lr * warmup_factor(t, warmup_steps)
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for n in names:
        g = params.grad(n).astype(np.float64)
        m = state.m.get(n)
        if m is None:
            m = state.m[n] = np.zeros_like(g)
            state.v[n] = np.zeros_like(g)
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        value = params[n]
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * value
        value -= (rate * update).astype(value.dtype)
    return rate
