"""Adam, cosine learning-rate annealing and global-norm gradient clipping."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    lr_initial: float = 2e-4
    lr_final: float = 1e-6
    total_epochs: int = 1000
    warmup_epochs: int = 0

    def __post_init__(self):
        if not (self.lr_initial > self.lr_final > 0):
            raise ConfigError(f"need lr_initial > lr_final > 0, got {self.lr_initial}, {self.lr_final}")
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")


def cosine_lr(schedule: ScheduleConfig, epoch: float) -> float:
    """Cosine decay from lr_initial at epoch 0 to lr_final at total_epochs.

    With warmup, the rate ramps linearly from lr_final over the first
    ``warmup_epochs`` and the cosine runs over the remainder.
    """
    total = schedule.total_epochs
    if epoch < 0 or epoch > total:
        warnings.warn(f"epoch {epoch} outside [0, {total}]; clamped", RuntimeWarning, stacklevel=2)
        epoch = min(max(epoch, 0), total)
    lo, hi = schedule.lr_final, schedule.lr_initial
    if total == 0:
        return hi
    warm = min(schedule.warmup_epochs, total)
    if epoch < warm:
        return lo + (hi - lo) * epoch / warm
    span = total - warm
    frac = (epoch - warm) / span if span else 1.0
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, lr: float):
    """One bias-corrected Adam update in place; gradients are zeroed afterward.

    Moments are keyed by parameter name, falling back to position.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UsageError(f"parameter {p.name or '?'} has no gradient; call backward() first")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        key = p.name or i
        g = p.grad
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)
        p.grad = np.zeros_like(p.data)


def grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))


def clip_grad_norm(params, max_norm=5.0) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    norm = grad_norm(params)
    if norm > max_norm:
        log.info("gradient norm %.3g clipped to %.3g", norm, max_norm)
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm
