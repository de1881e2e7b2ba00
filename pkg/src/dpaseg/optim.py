"""SGD with momentum, L2 weight decay and the poly learning-rate policy."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError


def poly_lr(base_lr, epoch, total_epochs, power=0.9):
    """``base_lr * (1 - epoch / total_epochs) ** power``, clamped at 0."""
    frac = max(0.0, 1.0 - epoch / total_epochs)
    return base_lr * frac**power


@dataclass
class OptimizerState:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-5
    poly_power: float = 0.9
    total_epochs: int = 100
    clip_norm: float | None = None
    epoch: int = 0
    momentum_buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.poly_power <= 0:
            raise ConfigurationError(f"poly_power must be > 0, got {self.poly_power}")
        if self.total_epochs < 1:
            raise ConfigurationError(f"total_epochs must be >= 1, got {self.total_epochs}")

    @property
    def lr(self):
        return poly_lr(self.base_lr, self.epoch, self.total_epochs, self.poly_power)


def sgd_step(params, state):
    """Update ``params`` in place and zero their gradients.

    v <- m * v + g + wd * p ;  p <- p - lr * v

    With ``state.clip_norm`` set, the loss gradients are first rescaled so
    their global L2 norm does not exceed it.
    """
    lr = state.lr
    for i, p in enumerate(params):
        if p.grad is None:
            raise TrainingError(f"parameter {p.name or i} has no gradient")
    scale = 1.0
    if state.clip_norm:
        norm = np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
        if norm > state.clip_norm:
            scale = state.clip_norm / norm
    for i, p in enumerate(params):
        g = p.grad * scale if scale != 1.0 else p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.momentum_buffers.get(i)
        v = g.copy() if v is None else state.momentum * v + g
        state.momentum_buffers[i] = v
        p.data -= lr * v
        p.grad.fill(0.0)
    return params


def params_checksum(params):
    """Order-sensitive digest of parameter bytes."""
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
