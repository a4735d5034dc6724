"""Pre-activation bottleneck ResNet with GELU activations.

Block interior is [BN -> GELU -> conv] three times (1x1 reduce, 3x3 at the
block stride, 1x1 expand by 4), the skip path is added afterwards with no
activation. The network ends with a final BN+GELU before global average
pooling, so the last residual output is normalized too.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError
from .tensor import Tensor, record

STEMS = ("cifar", "imagenet")


def _to_channels_last(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,H,W,C] as a recorded (differentiable) permutation."""
    from . import bufferpool
    n, c, h, w = x.shape
    buf = bufferpool.take((n, h, w, c), x.dtype)
    np.copyto(buf, x.data.transpose(0, 2, 3, 1))
    out = Tensor(buf)

    def vjp(g, needed):
        return (g.transpose(0, 3, 1, 2),) if needed[0] else (None,)

    return record(out, (x,), vjp)

EXPANSION = 4


@dataclass(frozen=True)
class ResNetConfig:
    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    num_classes: int = 10
    stem: str = "cifar"
    zero_init_residual: bool = False

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.stage_blocks)
        object.__setattr__(self, "stage_blocks", blocks)
        if len(blocks) != 4 or any(b < 1 for b in blocks):
            raise ConfigError(f"stage_blocks must be 4 positive ints, got {self.stage_blocks}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be positive, got {self.base_width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stem not in STEMS:
            raise ConfigError(f"stem must be one of {STEMS}, got {self.stem!r}")


ARCH_PRESETS = {
    "resnet50": ResNetConfig(stage_blocks=(3, 4, 6, 3), base_width=64),
    "small": ResNetConfig(stage_blocks=(2, 2, 2, 2), base_width=32),
    "tiny": ResNetConfig(stage_blocks=(1, 1, 1, 1), base_width=16),
}


class Conv2d:
    """Bias-free convolution layer with fan-in-scaled normal init."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: Optional[np.random.Generator] = None,
                 zero_init: bool = False):
        self.stride = stride
        self.padding = padding
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = in_ch * kernel * kernel
            std = np.sqrt(2.0 / fan_in)
            w = (rng.standard_normal(shape) * std).astype(np.float32)
        self.weight = Tensor(w, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, None, stride=self.stride, padding=self.padding,
                          channels_last=True)

    def parameters(self):
        return [self.weight]

    def state_items(self, prefix: str):
        return [(f"{prefix}.weight", self.weight.data)]


class BatchNorm2d:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running = ops.RunningStats(channels)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running,
                                train=train, eps=self.eps, momentum=self.momentum,
                                channels_last=True)

    def parameters(self):
        return [self.gamma, self.beta]

    def state_items(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma.data),
                (f"{prefix}.beta", self.beta.data),
                (f"{prefix}.running_mean", self.running.mean),
                (f"{prefix}.running_var", self.running.var)]


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        std = np.sqrt(1.0 / in_features)
        self.weight = Tensor((rng.standard_normal((out_features, in_features)) * std).astype(np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]

    def state_items(self, prefix: str):
        return [(f"{prefix}.weight", self.weight.data), (f"{prefix}.bias", self.bias.data)]


class PreActBottleneck:
    """1x1 reduce / 3x3 stride-s / 1x1 expand, each preceded by BN+GELU.

    The shortcut is the identity when shapes already match, otherwise a 1x1
    projection at the block stride applied to the raw input.
    """

    def __init__(self, in_ch: int, width: int, stride: int, rng: np.random.Generator,
                 zero_init_residual: bool = False):
        out_ch = EXPANSION * width
        self.bn1 = BatchNorm2d(in_ch)
        self.conv1 = Conv2d(in_ch, width, 1, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, stride=stride, padding=1, rng=rng)
        self.bn3 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_ch, 1, rng=rng, zero_init=zero_init_residual)
        if stride != 1 or in_ch != out_ch:
            self.shortcut: Optional[Conv2d] = Conv2d(in_ch, out_ch, 1, stride=stride, rng=rng)
        else:
            self.shortcut = None

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = self.conv1(ops.gelu(self.bn1(x, train)))
        h = self.conv2(ops.gelu(self.bn2(h, train)))
        h = self.conv3(ops.gelu(self.bn3(h, train)))
        sc = x if self.shortcut is None else self.shortcut(x)
        return ops.add(h, sc)

    def _children(self):
        mods = [("bn1", self.bn1), ("conv1", self.conv1), ("bn2", self.bn2),
                ("conv2", self.conv2), ("bn3", self.bn3), ("conv3", self.conv3)]
        if self.shortcut is not None:
            mods.append(("shortcut", self.shortcut))
        return mods

    def parameters(self):
        return [p for _, m in self._children() for p in m.parameters()]

    def state_items(self, prefix: str):
        return [item for name, m in self._children() for item in m.state_items(f"{prefix}.{name}")]


class ResNet:
    def __init__(self, config: ResNetConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        w = config.base_width
        if config.stem == "cifar":
            self.stem = Conv2d(3, w, 3, stride=1, padding=1, rng=rng)
        else:
            self.stem = Conv2d(3, w, 7, stride=2, padding=3, rng=rng)
        self.stages: list[list[PreActBottleneck]] = []
        in_ch = w
        for stage_idx, n_blocks in enumerate(config.stage_blocks):
            width = w * (2 ** stage_idx)
            stage_stride = 1 if stage_idx == 0 else 2
            blocks = []
            for block_idx in range(n_blocks):
                stride = stage_stride if block_idx == 0 else 1
                blocks.append(PreActBottleneck(in_ch, width, stride, rng,
                                               config.zero_init_residual))
                in_ch = EXPANSION * width
            self.stages.append(blocks)
        self.final_bn = BatchNorm2d(in_ch)
        self.head = Linear(in_ch, config.num_classes, rng)

    def __call__(self, images: Tensor, train: bool = False) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected images of shape [N,3,H,W], got {images.shape}")
        if self.config.stem == "cifar" and images.shape[2:] != (32, 32):
            raise ValueError(f"cifar stem expects 32x32 inputs, got {images.shape[2]}x{images.shape[3]}")
        # activations flow channels-last internally: convolutions become
        # single large GEMMs and the 1x1 paths need no data movement at all
        h = _to_channels_last(images)
        h = self.stem(h)
        for blocks in self.stages:
            for block in blocks:
                h = block(h, train)
        h = ops.gelu(self.final_bn(h, train))
        h = ops.global_avg_pool(h, channels_last=True)
        return self.head(h)

    def _children(self):
        mods = [("stem", self.stem)]
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                mods.append((f"stage{si + 1}.block{bi + 1}", block))
        mods.append(("final_bn", self.final_bn))
        mods.append(("head", self.head))
        return mods

    def parameters(self) -> list[Tensor]:
        """Trainable tensors, in declaration order."""
        return [p for _, m in self._children() for p in m.parameters()]

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Parameters and BN running stats, in declaration order."""
        return [item for name, m in self._children() for item in m.state_items(name)]

    def num_blocks(self) -> int:
        return sum(len(blocks) for blocks in self.stages)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_resnet(config: ResNetConfig, seed: int = 0) -> ResNet:
    """Deterministic construction: the same (config, seed) gives identical weights."""
    return ResNet(config, seed)


def block_forward(block: PreActBottleneck, x: Tensor, train: bool) -> Tensor:
    return block(x, train)


def forward(model: ResNet, images: Tensor, train: bool = False) -> Tensor:
    return model(images, train=train)


# ---------------------------------------------------------------------------
# checkpoints: "MXRS" | u32 version | config | state tensors
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MXRS"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], model: ResNet) -> None:
    """Versioned little-endian binary: header, config, then tensors in order."""
    cfg = model.config
    items = model.state_items()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    parts.append(struct.pack("<4I", *cfg.stage_blocks))
    parts.append(struct.pack("<III", cfg.base_width, cfg.num_classes, STEMS.index(cfg.stem)))
    parts.append(struct.pack("<I", len(items)))
    for _, arr in items:
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path],
                    expected_config: Optional[ResNetConfig] = None) -> ResNet:
    """Rebuild the model a checkpoint describes and fill in its tensors.

    Raises CheckpointError on a bad magic/version, truncated data, or a
    config that differs from ``expected_config`` when one is given.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    stage_blocks = struct.unpack("<4I", take(16))
    base_width, num_classes, stem_idx = struct.unpack("<III", take(12))
    if stem_idx >= len(STEMS):
        raise CheckpointError(f"{path}: unknown stem code {stem_idx}")
    try:
        config = ResNetConfig(stage_blocks=stage_blocks, base_width=base_width,
                              num_classes=num_classes, stem=STEMS[stem_idx])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    if expected_config is not None and _core_config(expected_config) != _core_config(config):
        raise CheckpointError(
            f"{path}: checkpoint config {_core_config(config)} does not match "
            f"expected {_core_config(expected_config)}")

    model = build_resnet(config, seed=0)
    items = model.state_items()
    (count,) = struct.unpack("<I", take(4))
    if count != len(items):
        raise CheckpointError(f"{path}: has {count} tensors, model needs {len(items)}")
    for name, arr in items:
        (ndim,) = struct.unpack("<I", take(4))
        if ndim != arr.ndim:
            raise CheckpointError(f"{path}: tensor {name} rank {ndim} != expected {arr.ndim}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name} shape {shape} != expected {arr.shape}")
        data = np.frombuffer(take(4 * arr.size), dtype="<f4").reshape(arr.shape)
        arr[...] = data
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return model


def _core_config(cfg: ResNetConfig) -> tuple:
    return (tuple(cfg.stage_blocks), cfg.base_width, cfg.num_classes, cfg.stem)
