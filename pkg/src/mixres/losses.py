"""Cross-entropy against soft targets, and the mixup objective built on it.

The mixup objective is the composition cross_entropy(mixed_targets,
log_softmax_clamped(logits)): softmax probabilities are clamped to
[1e-5, 1] before the log, so every per-sample value lies in
[0, -ln(1e-5)] and the total is always finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor

REDUCTIONS = ("mean", "sum")

LOSS_CEILING = -float(np.log(1e-5))  # 11.512925...


@dataclass
class LossValue:
    """Graph-connected total plus detached per-sample values."""

    total: Tensor
    per_sample: np.ndarray
    reduction: str


def cross_entropy(target_dist: Tensor, log_probs: Tensor, reduction: str = "mean") -> LossValue:
    """per_sample[i] = -sum_k target[i,k] * log_probs[i,k], reduced over the batch.

    Targets must be distributions: non-negative rows summing to 1 within
    1e-5. Gradient flows through ``log_probs`` only.
    """
    if reduction not in REDUCTIONS:
        raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if target_dist.shape != log_probs.shape:
        raise ValueError(
            f"target shape {target_dist.shape} != log_probs shape {log_probs.shape}")
    t = target_dist.data
    if np.any(t < 0):
        raise ValueError("target distributions must be non-negative")
    row_sums = t.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        worst = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"target row {worst} sums to {row_sums[worst]:.6f}, expected 1")
    if not np.all(np.isfinite(log_probs.data)):
        raise ValueError("log_probs contain non-finite values")

    n = t.shape[0]
    per_sample = -(t.astype(np.float64) * log_probs.data.astype(np.float64)).sum(axis=1)
    target_const = Tensor(t)  # constant: no gradient to the targets
    summed = ops.sum_all(ops.mul(target_const, log_probs))
    total = ops.scale(summed, -1.0 if reduction == "sum" else -1.0 / n)
    return LossValue(total=total, per_sample=per_sample, reduction=reduction)


def mixup_loss(logits: Tensor, mixed_targets: Tensor, reduction: str = "mean") -> LossValue:
    """Mixed cross-entropy on clamped log-softmax outputs."""
    return cross_entropy(mixed_targets, ops.log_softmax_clamped(logits), reduction)
