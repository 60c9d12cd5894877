"""AdamW with decoupled weight decay, and polynomial learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class ScheduleConfig:
    """Polynomial decay from base_lr to min_lr over total_steps."""

    base_lr: float = 1e-4
    min_lr: float = 1e-5
    power: float = 3.0
    total_steps: int = 1

    def __post_init__(self):
        if not self.base_lr >= self.min_lr > 0:
            raise ValueError(f"need base_lr >= min_lr > 0, got {self.base_lr}, {self.min_lr}")
        if self.power <= 0:
            raise ValueError(f"power must be > 0, got {self.power}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")


def poly_lr(step: int, schedule: ScheduleConfig) -> float:
    """lr = (base - min) * (1 - step/total)**power + min.

    Steps past total_steps clamp to min_lr.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= schedule.total_steps:
        return schedule.min_lr
    frac = 1.0 - step / schedule.total_steps
    return (schedule.base_lr - schedule.min_lr) * frac ** schedule.power + schedule.min_lr


@dataclass
class OptimState:
    """Per-parameter first/second moment accumulators and the shared step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optim_state(params: dict[str, Tensor]) -> OptimState:
    return OptimState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
        step=0,
    )


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float, weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, check_finite: bool = False) -> OptimState:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied directly to the weights (scaled by lr), not mixed
    into the gradients. Parameters missing from ``grads`` are treated as
    having zero gradient (they still decay). Updates in place.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        elif g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"'{name}' shape {tensor.data.shape}")
        if check_finite and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * tensor.data
        tensor.data -= (lr * update).astype(tensor.data.dtype, copy=False)
    return state
