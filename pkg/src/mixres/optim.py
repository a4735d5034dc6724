"""SGD with momentum and L2 weight decay, plus epoch-wise cosine annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class CosineSchedule:
    """Half cosine arc from eta_max down to eta_min over t_max epochs."""

    eta_max: float
    t_max: int
    eta_min: float = 0.0

    def __post_init__(self):
        if self.eta_min < 0 or self.eta_max < self.eta_min:
            raise ConfigError(
                f"need eta_max >= eta_min >= 0, got {self.eta_max}, {self.eta_min}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    """eta(t) = eta_min + 0.5*(eta_max - eta_min)*(1 + cos(pi*t/t_max))."""
    if not 0 <= t <= schedule.t_max:
        raise ValueError(f"epoch {t} outside schedule range [0, {schedule.t_max}]")
    span = schedule.eta_max - schedule.eta_min
    return schedule.eta_min + 0.5 * span * (1.0 + math.cos(math.pi * t / schedule.t_max))


def sgd_step(params: list[Tensor], velocities: list[np.ndarray], config: SgdConfig,
             lr: float | None = None) -> None:
    """One update: v <- m*v + g + wd*w; w <- w - lr*v, in place."""
    lr = config.lr if lr is None else lr
    m = config.momentum
    wd = config.weight_decay
    for i, (p, v) in enumerate(zip(params, velocities)):
        if p.grad is None:
            raise ValueError(f"parameter {i} has no gradient; run backward() first")
        g = p.grad
        if wd != 0.0:
            g = g + np.asarray(wd, dtype=p.data.dtype) * p.data
        v *= np.asarray(m, dtype=v.dtype)
        v += g
        p.data -= np.asarray(lr, dtype=p.data.dtype) * v


class SGD:
    """Stateful wrapper around sgd_step: velocity persists across steps.

    The learning rate is mutable so a schedule can set it per epoch;
    velocities are exposed for checkpointing.
    """

    def __init__(self, params: list[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.lr = config.lr
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.velocities, self.config, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
