"""LAMB optimizer with warmup + linear-decay schedule and decoupled decay.

The update per named tensor w with gradient g:
    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    u  = m_hat / (sqrt(v_hat) + eps) + wd*w      (bias-corrected moments)
    r  = clamp(||w||, 0.01, 10) / (||u|| + 1e-12), or 1 when u vanishes
    w <- w - lr * r * u
Weight decay is skipped for bias and gain tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Tensor


class NumericFailure(RuntimeError):
    """NaN/Inf gradients; the step is aborted."""


@dataclass
class Schedule:
    max_lr: float = 2e-3
    warmup_steps: int = 4000
    final_lr: float = 2e-7
    decay_steps: int = 200_000

    def validate(self) -> None:
        if self.warmup_steps > self.decay_steps:
            raise ValueError("warmup must end before decay does")
        if self.final_lr > self.max_lr:
            raise ValueError("final_lr must not exceed max_lr")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear 0 -> max over warmup, max -> final at decay_steps, flat after."""
    schedule.validate()
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step <= schedule.warmup_steps:
        if schedule.warmup_steps == 0:
            return schedule.max_lr
        return schedule.max_lr * step / schedule.warmup_steps
    if step >= schedule.decay_steps:
        return schedule.final_lr
    frac = (step - schedule.warmup_steps) / (schedule.decay_steps
                                             - schedule.warmup_steps)
    return schedule.max_lr + frac * (schedule.final_lr - schedule.max_lr)


def _no_decay(name: str) -> bool:
    return (name.endswith(".b") or name.endswith(".g")
            or name.endswith("attn.u") or name.endswith("attn.v"))


@dataclass
class OptState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    trust_min: float = 0.01
    trust_max: float = 10.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def lamb_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptState, lr: float,
              force_trust_one: bool = False) -> None:
    """Apply one LAMB update in place; advances the state step counter."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        w = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(w.data)
            state.v[name] = np.zeros_like(w.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        u = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay and not _no_decay(name):
            u = u + state.weight_decay * w.data
        if force_trust_one:
            r = 1.0
        else:
            u_norm = float(np.linalg.norm(u))
            if u_norm > 0.0:
                w_norm = float(np.linalg.norm(w.data))
                r = np.clip(w_norm, state.trust_min, state.trust_max) \
                    / (u_norm + 1e-12)
            else:
                r = 1.0
        w.data = (w.data - lr * r * u).astype(w.data.dtype)
