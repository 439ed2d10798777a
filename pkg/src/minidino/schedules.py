"""Scheduled scalars (learning rate, weight decay, teacher momentum) and SGD.

All schedules are pure functions of (config, iteration), evaluated per
iteration with T_c = epochs * iterations-per-epoch. The learning-rate
schedule is linear warmup followed by cosine decay from eta_max to eta_min.

The published form of the decay writes the cosine argument as
pi*(T_c - t)/T_c, which starts at eta_min and ends at eta_max; the
hyperparameter table and standard practice pair eta_max with the start of
decay, so the default here uses pi*t/T_c. Set eq2_verbatim=True to get the
printed orientation instead.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .nets import ParameterSet


@dataclass(frozen=True)
class CosineSchedule:
    eta_min: float
    eta_max: float
    total_iters: int
    warmup_iters: int = 0
    warmup_start: float = 0.0
    eq2_verbatim: bool = False

    def __post_init__(self):
        if self.eta_min > self.eta_max:
            raise ValueError(f"eta_min {self.eta_min} > eta_max {self.eta_max}")
        if not 0 <= self.warmup_iters < max(self.total_iters, 1):
            raise ValueError(f"warmup_iters {self.warmup_iters} must be < total_iters {self.total_iters}")


def cosine_interp(start: float, end: float, t: int, total: int) -> float:
    """Cosine interpolation from `start` at t=0 to `end` at t=total."""
    if total <= 0:
        return end
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * t / total))


def cosine_value(s: CosineSchedule, t: int) -> float:
    """Scheduled value at iteration t: linear warmup then cosine decay."""
    if t < 0 or t > s.total_iters:
        warnings.warn(f"schedule iteration {t} outside [0, {s.total_iters}]; clamping")
        t = min(max(t, 0), s.total_iters)
    if t < s.warmup_iters:
        frac = t / s.warmup_iters
        return s.warmup_start + (s.eta_max - s.warmup_start) * frac
    td = t - s.warmup_iters
    total = s.total_iters - s.warmup_iters
    if s.eq2_verbatim:
        # Printed orientation: cos(pi*(T_c - t)/T_c); runs eta_min -> eta_max.
        return s.eta_min + 0.5 * (s.eta_max - s.eta_min) * (1.0 + math.cos(math.pi * (total - td) / total))
    return cosine_interp(s.eta_max, s.eta_min, td, total)


def momentum_schedule(t: int, total_iters: int, base: float = 0.9995, end: float = 1.0) -> float:
    """Teacher EMA momentum, increasing from `base` to `end` over training."""
    t = min(max(t, 0), total_iters)
    return cosine_interp(base, end, t, total_iters)


def weight_decay_schedule(t: int, total_iters: int, start: float = 0.04, end: float = 0.4) -> float:
    t = min(max(t, 0), total_iters)
    return cosine_interp(start, end, t, total_iters)


# Optimizer -----------------------------------------------------------------


@dataclass
class OptimizerState:
    """Momentum-SGD state with global gradient clipping.

    Weight decay is decoupled and skipped for 1-D parameters (biases and
    normalization gains/shifts).
    """

    clip_grad: float = 2.0
    momentum: float = 0.9
    clip_mode: str = "norm"  # "norm" (global L2) or "element"
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure_buffers(self, params: ParameterSet) -> None:
        for name, arr in params.items():
            if name not in self.buffers:
                self.buffers[name] = np.zeros_like(arr)


def clip_gradients(grads: dict[str, np.ndarray], clip: float, mode: str = "norm") -> dict[str, np.ndarray]:
    """Scale all gradients so the global L2 norm is at most `clip`.

    Element mode clamps each entry to [-clip, clip] instead.
    """
    if clip <= 0:
        return grads
    if mode == "element":
        return {name: np.clip(g, -clip, clip) for name, g in grads.items()}
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm <= clip:
        return grads
    scale = np.float32(clip / norm)
    return {name: g * scale for name, g in grads.items()}


def sgd_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    wd: float,
) -> None:
    """In-place update: clip -> decoupled weight decay -> momentum SGD."""
    state.ensure_buffers(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
    grads = clip_gradients(grads, state.clip_grad, state.clip_mode)
    lr32 = np.float32(lr)
    for name, _ in params.items():
        g = grads.get(name)
        if g is None:
            continue
        p = params[name]
        if wd > 0 and p.ndim >= 2:
            p = p - lr32 * np.float32(wd) * p
        buf = state.buffers[name]
        if state.momentum > 0:
            buf = np.float32(state.momentum) * buf + g
            state.buffers[name] = buf
        else:
            buf = g
        params[name] = p - lr32 * buf
    params.version += 1
