"""Train-time augmentation: random pad-and-crop, horizontal flip, and mixup.

All functions are pure in (inputs, rng): randomness comes only from the
numpy Generator handed in, so a seeded generator reproduces every draw.
The evaluation path never calls into this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class MixupConfig:
    """Shape parameter of the symmetric beta distribution, plus an on/off switch."""

    alpha: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"mixup alpha must be > 0, got {self.alpha}")


@dataclass
class MixupDraw:
    """One batch worth of mixed inputs/targets with the coefficients used."""

    mixed_inputs: Tensor
    mixed_targets: Tensor
    lam: np.ndarray
    index: np.ndarray


def one_hot(labels: np.ndarray, num_classes: int) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=np.float32)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(out)


def sample_beta(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. Beta(alpha, alpha) draws in [0,1]."""
    if alpha <= 0:
        raise ConfigError(f"beta shape parameter must be > 0, got {alpha}")
    return rng.beta(alpha, alpha, size=n)


def mixup(inputs: Tensor, targets_onehot: Tensor, config: MixupConfig,
          rng: np.random.Generator) -> MixupDraw:
    """Convex-combine each sample with a permutation partner.

    A per-sample coefficient vector is drawn from Beta(alpha, alpha) and one
    shared random permutation pairs the batch with itself (self-pairs are
    allowed). Mixed sample i is lam[i]*x[i] + (1-lam[i])*x[index[i]], and
    the soft target mixes identically.
    """
    n = inputs.shape[0]
    if targets_onehot.shape[0] != n:
        raise ValueError(
            f"batch mismatch: {n} inputs vs {targets_onehot.shape[0]} target rows")
    lam = sample_beta(config.alpha, n, rng)
    index = rng.permutation(n)
    return mixup_with(inputs, targets_onehot, lam, index)


def mixup_with(inputs: Tensor, targets_onehot: Tensor, lam: np.ndarray,
               index: np.ndarray) -> MixupDraw:
    """Mixup with explicit coefficients and pairing (the forced-draw core)."""
    n = inputs.shape[0]
    lam = np.asarray(lam, dtype=np.float64)
    index = np.asarray(index)
    if lam.shape != (n,):
        raise ValueError(f"lam must have shape ({n},), got {lam.shape}")
    if sorted(index.tolist()) != list(range(n)):
        raise ValueError("index must be a permutation of the batch")
    lam_x = lam.reshape((n,) + (1,) * (inputs.ndim - 1))
    lam_t = lam.reshape(n, 1)
    # mix in float64 so results stay inside [min, max] after the f32 cast
    x = inputs.data.astype(np.float64)
    t = targets_onehot.data.astype(np.float64)
    mixed_x = lam_x * x + (1.0 - lam_x) * x[index]
    mixed_t = lam_t * t + (1.0 - lam_t) * t[index]
    return MixupDraw(
        mixed_inputs=Tensor(mixed_x.astype(inputs.dtype)),
        mixed_targets=Tensor(mixed_t.astype(targets_onehot.dtype)),
        lam=lam,
        index=index,
    )


def random_crop(images: Tensor, pad: int, rng: np.random.Generator) -> Tensor:
    """Zero-pad all four sides by ``pad`` and crop a random full-size window."""
    if pad < 0:
        raise ConfigError(f"crop pad must be >= 0, got {pad}")
    if pad == 0:
        return images
    n = images.shape[0]
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    return crop_at(images, pad, offsets)


def crop_at(images: Tensor, pad: int, offsets: np.ndarray) -> Tensor:
    """Crop with explicit per-image (row, col) offsets in [0, 2*pad]."""
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images.data
    out = np.empty_like(images.data)
    for i, (dy, dx) in enumerate(np.asarray(offsets)):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return Tensor(out)


def horizontal_flip(images: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Mirror each image along its width independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"flip probability must be in [0,1], got {p}")
    mask = rng.random(images.shape[0]) < p
    return flip_where(images, mask)


def flip_where(images: Tensor, mask: np.ndarray) -> Tensor:
    out = images.data.copy()
    mask = np.asarray(mask, dtype=bool)
    out[mask] = out[mask, :, :, ::-1]
    return Tensor(out)
