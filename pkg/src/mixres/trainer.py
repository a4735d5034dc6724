"""Training orchestration: epochs, evaluation, logging, checkpoints, resume.

Per-epoch randomness is derived from (seed, epoch) so a run resumed from a
checkpoint consumes exactly the same augmentation and shuffling draws as an
uninterrupted one; with a single thread the whole metric trail is
bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import ops
from .augment import MixupConfig, horizontal_flip, mixup, one_hot, random_crop
from .data import DatasetSplit, batch_iter
from .errors import ConfigError, TrainingDiverged
from .losses import REDUCTIONS, mixup_loss
from .optim import SGD, CosineSchedule, SgdConfig, cosine_lr
from .resnet import ResNet, ResNetConfig, build_resnet, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward

_SHUFFLE_STREAM = 0
_AUG_STREAM = 1

RUNLOG_NAME = "runlog.jsonl"
SUMMARY_CSV_NAME = "summary.csv"
SUMMARY_JSON_NAME = "summary.json"
CKPT_LAST = "checkpoint_last.mxrs"
CKPT_BEST = "checkpoint_best.mxrs"
TRAIN_STATE = "train_state.bin"


@dataclass
class TrainConfig:
    """One run's hyperparameters; defaults are the tuned recipe."""

    lr: float = 0.05
    batch_size: int = 128
    epochs: int = 200
    t_max: int = 200
    eta_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    mixup: MixupConfig = field(default_factory=MixupConfig)
    crop_pad: int = 4
    flip_p: float = 0.5
    loss_reduction: str = "mean"
    seed: int = 0
    eval_every: int = 1
    arch: ResNetConfig = field(default_factory=ResNetConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.epochs > self.t_max:
            raise ConfigError(f"epochs ({self.epochs}) cannot exceed t_max ({self.t_max})")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.crop_pad < 0:
            raise ConfigError(f"crop_pad must be >= 0, got {self.crop_pad}")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError(f"flip_p must be in [0,1], got {self.flip_p}")
        if self.loss_reduction not in REDUCTIONS:
            raise ConfigError(f"loss_reduction must be one of {REDUCTIONS}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        # lr/momentum/weight_decay ranges are enforced by SgdConfig
        SgdConfig(self.lr, self.momentum, self.weight_decay)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    test_loss: Optional[float]
    test_error_pct: Optional[float]
    lr: float
    wall_seconds: float
    train_loss_clean: Optional[float] = None

    def to_json_dict(self) -> dict:
        # wall_seconds is deliberately excluded: run logs for the same seed
        # must be byte-identical, and timing never is.
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_loss_clean": self.train_loss_clean,
            "test_loss": self.test_loss,
            "test_error_pct": self.test_error_pct,
            "lr": self.lr,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "EpochMetrics":
        return EpochMetrics(
            epoch=d["epoch"], train_loss=d["train_loss"], test_loss=d["test_loss"],
            test_error_pct=d["test_error_pct"], lr=d["lr"], wall_seconds=0.0,
            train_loss_clean=d.get("train_loss_clean"))


@dataclass
class RunLog:
    config: dict
    epochs: list[EpochMetrics]
    summary: dict

    def final(self) -> EpochMetrics:
        return self.epochs[-1]


def _epoch_rngs(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle = np.random.default_rng([seed, epoch, _SHUFFLE_STREAM])
    aug = np.random.default_rng([seed, epoch, _AUG_STREAM])
    return shuffle, aug


def train_epoch(model: ResNet, split: DatasetSplit, config: TrainConfig, epoch: int,
                optimizer: SGD) -> tuple[float, float]:
    """One pass over the split: augment, mix, step. Returns (objective, clean) means.

    The objective mean is the per-sample mixup loss actually optimized; the
    clean mean scores the same logits against the original labels.
    """
    shuffle_rng, aug_rng = _epoch_rngs(config.seed, epoch)
    num_classes = model.config.num_classes
    total = 0.0
    total_clean = 0.0
    seen = 0
    for batch_idx, (images, labels) in enumerate(
            batch_iter(split, config.batch_size, shuffle=True, seed=shuffle_rng)):
        if config.crop_pad > 0:
            images = random_crop(images, config.crop_pad, aug_rng)
        if config.flip_p > 0:
            images = horizontal_flip(images, config.flip_p, aug_rng)
        targets = one_hot(labels, num_classes)
        if config.mixup.enabled:
            draw = mixup(images, targets, config.mixup, aug_rng)
            inputs, train_targets = draw.mixed_inputs, draw.mixed_targets
        else:
            inputs, train_targets = images, targets
        optimizer.zero_grad()
        with Tape() as tape:
            logits = model(inputs, train=True)
            if not np.all(np.isfinite(logits.data)):
                raise TrainingDiverged(
                    f"non-finite logits at epoch {epoch}, batch {batch_idx}, lr {optimizer.lr:g}",
                    epoch=epoch, batch=batch_idx, lr=optimizer.lr)
            loss = mixup_loss(logits, train_targets, config.loss_reduction)
        objective = loss.total.item()
        if not math.isfinite(objective):
            raise TrainingDiverged(
                f"non-finite loss {objective} at epoch {epoch}, batch {batch_idx}, lr {optimizer.lr:g}",
                epoch=epoch, batch=batch_idx, lr=optimizer.lr)
        backward(tape, loss.total)
        optimizer.step()
        total += float(loss.per_sample.sum())
        clean_logp = ops.log_softmax_clamped(Tensor(logits.data)).data
        total_clean += float(-clean_logp[np.arange(labels.shape[0]), labels].sum())
        seen += labels.shape[0]
    return total / seen, total_clean / seen


def evaluate(model: ResNet, split: DatasetSplit, batch_size: int) -> tuple[float, float]:
    """Mean cross-entropy and error% on a clean, un-augmented pass.

    Eval mode uses BN running statistics and mutates nothing; argmax ties
    resolve to the lowest class index.
    """
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    total = 0.0
    correct = 0
    for images, labels in batch_iter(split, batch_size, shuffle=False):
        logits = model(images, train=False)
        logp = ops.log_softmax_clamped(logits).data
        total += float(-logp[np.arange(labels.shape[0]), labels].sum())
        correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    n = len(split)
    return total / n, 100.0 * (1.0 - correct / n)


def fit(config: TrainConfig, train_split: DatasetSplit, test_split: DatasetSplit,
        out_dir: Union[str, Path, None] = None, resume: bool = False) -> RunLog:
    """Run the full schedule; optionally write logs/checkpoints incrementally.

    With ``resume`` and an ``out_dir`` holding earlier state, training
    continues from the last completed epoch and reproduces exactly what an
    uninterrupted run would have computed.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = build_resnet(config.arch, config.seed)
    optimizer = SGD(model.parameters(), SgdConfig(config.lr, config.momentum, config.weight_decay))
    schedule = CosineSchedule(eta_max=config.lr, t_max=config.t_max, eta_min=config.eta_min)

    start_epoch = 0
    best_error = math.inf
    metrics: list[EpochMetrics] = []
    state_path = out / TRAIN_STATE if out else None
    if resume and out is not None and state_path.is_file():
        model = load_checkpoint(out / CKPT_LAST, expected_config=config.arch)
        start_epoch, best_error, velocities = _read_train_state(state_path, optimizer)
        optimizer = SGD(model.parameters(), optimizer.config)
        optimizer.velocities = velocities
        metrics = _read_runlog_epochs(out / RUNLOG_NAME)
        if len(metrics) != start_epoch:
            raise ConfigError(
                f"resume state inconsistent: {len(metrics)} logged epochs vs {start_epoch} completed")
    elif out is not None:
        (out / RUNLOG_NAME).write_text(_config_line(config) + "\n")
        (out / SUMMARY_CSV_NAME).write_text("epoch,train_loss,test_loss,test_error_pct,lr\n")

    for epoch in range(start_epoch + 1, config.epochs + 1):
        lr_now = cosine_lr(schedule, epoch - 1)
        optimizer.lr = lr_now
        t0 = time.perf_counter()
        train_loss, clean_loss = train_epoch(model, train_split, config, epoch, optimizer)
        should_eval = (epoch % config.eval_every == 0) or (epoch == config.epochs)
        test_loss = test_error = None
        if should_eval:
            test_loss, test_error = evaluate(model, test_split, config.batch_size)
        em = EpochMetrics(epoch=epoch, train_loss=train_loss, test_loss=test_loss,
                          test_error_pct=test_error, lr=lr_now,
                          wall_seconds=time.perf_counter() - t0, train_loss_clean=clean_loss)
        metrics.append(em)
        if out is not None:
            with open(out / RUNLOG_NAME, "a") as fh:
                fh.write(json.dumps(em.to_json_dict(), sort_keys=True) + "\n")
            with open(out / SUMMARY_CSV_NAME, "a") as fh:
                fh.write(_csv_row(em))
            save_checkpoint(out / CKPT_LAST, model)
            if should_eval and test_error < best_error:
                best_error = test_error
                save_checkpoint(out / CKPT_BEST, model)
            _write_train_state(state_path, epoch, best_error, optimizer)

    summary = _summarize(metrics)
    if out is not None:
        (out / SUMMARY_JSON_NAME).write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return RunLog(config=config.to_dict(), epochs=metrics, summary=summary)


def compare_mixup(config: TrainConfig, train_split: DatasetSplit, test_split: DatasetSplit,
                  out_dir: Union[str, Path, None] = None,
                  enabled_pair: tuple[bool, bool] = (True, False)) -> dict:
    """Two runs differing only in whether mixup is applied, plus their deltas."""
    out = Path(out_dir) if out_dir is not None else None
    logs = {}
    for label, enabled in zip(("mixup", "nomixup"), enabled_pair):
        cfg = dataclasses.replace(
            config, mixup=dataclasses.replace(config.mixup, enabled=enabled))
        sub = out / label if out is not None else None
        logs[label] = fit(cfg, train_split, test_split, out_dir=sub)
    mix_final = logs["mixup"].final()
    nomix_final = logs["nomixup"].final()
    deltas = {
        "final_train_loss_mixup": mix_final.train_loss,
        "final_train_loss_nomixup": nomix_final.train_loss,
        "train_loss_mixup_minus_nomixup": mix_final.train_loss - nomix_final.train_loss,
        "final_test_loss_mixup": mix_final.test_loss,
        "final_test_loss_nomixup": nomix_final.test_loss,
        "test_loss_ratio_nomixup_over_mixup": (
            nomix_final.test_loss / mix_final.test_loss if mix_final.test_loss else math.inf),
        "final_test_error_pct_mixup": mix_final.test_error_pct,
        "final_test_error_pct_nomixup": nomix_final.test_error_pct,
    }
    if out is not None:
        (out / "compare_summary.json").write_text(json.dumps(deltas, sort_keys=True, indent=2) + "\n")
    return {"mixup": logs["mixup"], "nomixup": logs["nomixup"], "deltas": deltas}


# ---------------------------------------------------------------------------
# persistence helpers
# ---------------------------------------------------------------------------

def _config_line(config: TrainConfig) -> str:
    return json.dumps({"config": config.to_dict()}, sort_keys=True)


def _csv_row(em: EpochMetrics) -> str:
    test_loss = "" if em.test_loss is None else repr(em.test_loss)
    test_err = "" if em.test_error_pct is None else repr(em.test_error_pct)
    return f"{em.epoch},{em.train_loss!r},{test_loss},{test_err},{em.lr!r}\n"


def _summarize(metrics: list[EpochMetrics]) -> dict:
    evaluated = [m for m in metrics if m.test_error_pct is not None]
    best = min(evaluated, key=lambda m: (m.test_error_pct, m.epoch)) if evaluated else None
    return {
        "epochs_completed": len(metrics),
        "final_train_loss": metrics[-1].train_loss if metrics else None,
        "final_test_loss": metrics[-1].test_loss if metrics else None,
        "final_test_error_pct": metrics[-1].test_error_pct if metrics else None,
        "best_test_error_pct": best.test_error_pct if best else None,
        "best_epoch": best.epoch if best else None,
    }


def read_runlog(path: Union[str, Path]) -> RunLog:
    """Parse a runlog.jsonl back into a RunLog (summary recomputed)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty run log")
    header = json.loads(lines[0])
    epochs = [EpochMetrics.from_json_dict(json.loads(line)) for line in lines[1:]]
    return RunLog(config=header["config"], epochs=epochs, summary=_summarize(epochs))


def _read_runlog_epochs(path: Path) -> list[EpochMetrics]:
    if not path.is_file():
        return []
    return read_runlog(path).epochs


_STATE_MAGIC = b"MXTS"
_STATE_VERSION = 1


def _write_train_state(path: Path, epoch: int, best_error: float, optimizer: SGD) -> None:
    parts = [_STATE_MAGIC, struct.pack("<II", _STATE_VERSION, epoch),
             struct.pack("<d", best_error),
             struct.pack("<I", len(optimizer.velocities))]
    for v in optimizer.velocities:
        parts.append(struct.pack("<I", v.ndim))
        parts.append(struct.pack(f"<{v.ndim}I", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def _read_train_state(path: Path, optimizer: SGD) -> tuple[int, float, list[np.ndarray]]:
    raw = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise ConfigError(f"{path}: truncated training state")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != _STATE_MAGIC:
        raise ConfigError(f"{path}: not a training state file")
    version, epoch = struct.unpack("<II", take(8))
    if version != _STATE_VERSION:
        raise ConfigError(f"{path}: unsupported training state version {version}")
    (best_error,) = struct.unpack("<d", take(8))
    (count,) = struct.unpack("<I", take(4))
    if count != len(optimizer.velocities):
        raise ConfigError(f"{path}: {count} velocity tensors, optimizer expects "
                          f"{len(optimizer.velocities)}")
    velocities = []
    for ref in optimizer.velocities:
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if shape != ref.shape:
            raise ConfigError(f"{path}: velocity shape {shape} != expected {ref.shape}")
        velocities.append(np.frombuffer(take(4 * ref.size), dtype="<f4").reshape(shape).copy())
    return epoch, best_error, velocities
