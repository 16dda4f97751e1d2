"""AdamW with AMSGrad, plus the warm-up cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class OptimizerError(RuntimeError):
    """Raised when a step cannot be applied (e.g. non-finite gradients)."""


class ScheduleError(ValueError):
    """Raised for steps outside the schedule's domain."""


@dataclass
class AdamWState:
    """Per-parameter moments plus the shared step counter.

    ``v`` and ``v_max`` stay element-wise non-negative; ``v_max`` is monotone
    non-decreasing (AMSGrad).
    """

    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    amsgrad: bool = True
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)


def _moments_for(state: AdamWState, name: str, param: Tensor):
    if name not in state.m:
        state.m[name] = np.zeros_like(param.data)
        state.v[name] = np.zeros_like(param.data)
        state.v_max[name] = np.zeros_like(param.data)
    if state.m[name].shape != param.data.shape:
        raise OptimizerError(f"optimizer state for '{name}' has stale shape")
    return state.m[name], state.v[name], state.v_max[name]


def adamw_step(params: dict, state: AdamWState, lr: float) -> None:
    """Apply one decoupled-weight-decay Adam step to every named parameter.

    Weight decay shrinks parameters before the adaptive update; the adaptive
    denominator uses the running element-wise maximum of the second moment.
    Parameters with no gradient are skipped; a non-finite gradient rejects
    the whole step.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite gradient for parameter '{name}'")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t

    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(p.data.dtype, copy=False)
        m, v, v_max = _moments_for(state, name, p)

        new = p.data * (1.0 - lr * state.weight_decay)

        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * np.square(g)
        if state.amsgrad:
            np.maximum(v_max, v, out=v_max)
            denom = np.sqrt(v_max) / math.sqrt(bc2) + state.eps
        else:
            denom = np.sqrt(v) / math.sqrt(bc2) + state.eps

        new = new - lr * (m / bc1) / denom
        p.assign(new)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up followed by cosine decay to a fixed floor.

    The ramp runs from ``warmup_start_lr`` at step 0 to ``base_lr`` at the
    end of ``warmup_epochs``; the cosine then decays to
    ``floor_fraction * base_lr`` exactly at the final step.
    """

    steps_per_epoch: int
    base_lr: float = 1e-3
    warmup_start_lr: float = 1e-5
    warmup_epochs: int = 2
    total_epochs: int = 20
    floor_fraction: float = 0.01

    def __post_init__(self):
        if self.steps_per_epoch < 1:
            raise ScheduleError("steps_per_epoch must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ScheduleError("warmup must fit strictly inside the run")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step: int, sched: LrSchedule) -> float:
    """Learning rate for a 0-based global step."""
    if not 0 <= step < sched.total_steps:
        raise ScheduleError(f"step {step} outside [0, {sched.total_steps})")
    warm = sched.warmup_steps
    if step < warm:
        frac = step / warm
        return sched.warmup_start_lr + (sched.base_lr - sched.warmup_start_lr) * frac
    floor = sched.floor_fraction * sched.base_lr
    span = sched.total_steps - 1 - warm
    if span <= 0:
        return floor
    phase = (step - warm) / span
    return floor + (sched.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * phase))
