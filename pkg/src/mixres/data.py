"""CIFAR-10 binary dataset handling: parsing, normalization, batching, fixtures.

The on-disk format is the standard CIFAR-10 *binary* distribution: each
record is 3073 bytes, one label byte followed by 3072 pixel bytes laid out
as 1024 R, 1024 G, 1024 B values, row-major within each plane.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .errors import DataError
from .tensor import Tensor

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
CANONICAL_RECORDS_PER_FILE = 10_000
CANONICAL_FILE_BYTES = CANONICAL_RECORDS_PER_FILE * RECORD_BYTES  # 30,730,000

TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"

DATA_DIR_ENV = "MIXRES_DATA_DIR"


@dataclass
class DatasetSplit:
    """Images in [0,1] (or normalized) plus integer labels for one split."""

    images: Tensor
    labels: np.ndarray
    name: str

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, n: int, name: str | None = None) -> "DatasetSplit":
        """First ``n`` samples, as a new split."""
        if not 1 <= n <= len(self):
            raise DataError(f"cannot take {n} samples from split of {len(self)}")
        return DatasetSplit(Tensor(self.images.data[:n]), self.labels[:n], name or self.name)

    def slice(self, start: int, stop: int, name: str | None = None) -> "DatasetSplit":
        if not (0 <= start < stop <= len(self)):
            raise DataError(f"bad slice [{start}:{stop}] for split of {len(self)}")
        return DatasetSplit(Tensor(self.images.data[start:stop]), self.labels[start:stop],
                            name or self.name)


@dataclass
class NormStats:
    """Per-channel mean/std computed on the training split."""

    mean: np.ndarray
    std: np.ndarray


def parse_records(raw: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode raw record bytes into (labels[N], images[N,3,32,32] uint8)."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
        raise DataError(
            f"{source}: length {len(raw)} is not a positive multiple of {RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = labels > NUM_CLASSES - 1
    if bad.any():
        idx = int(np.argmax(bad))
        raise DataError(f"{source}: record {idx} has label byte {labels[idx]} > 9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return labels, images


def serialize_records(labels: np.ndarray, images: np.ndarray) -> bytes:
    """Inverse of parse_records; images must be uint8 [N,3,32,32]."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(images, dtype=np.uint8).reshape(labels.shape[0], -1)
    return np.concatenate([labels, pixels], axis=1).tobytes()


def read_batch_file(path: Union[str, Path]) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    return parse_records(path.read_bytes(), source=str(path))


def verify_canonical_sizes(dir_path: Union[str, Path]) -> None:
    """Check that every batch file has the official 30,730,000-byte size."""
    dir_path = Path(dir_path)
    for fname in TRAIN_FILES + (TEST_FILE,):
        path = dir_path / fname
        if not path.is_file():
            raise DataError(f"dataset file not found: {path}")
        size = path.stat().st_size
        if size != CANONICAL_FILE_BYTES:
            raise DataError(
                f"{path}: {size} bytes, expected {CANONICAL_FILE_BYTES} "
                f"({CANONICAL_RECORDS_PER_FILE} records of {RECORD_BYTES} bytes)")


def load_cifar10_binary(dir_path: Union[str, Path]) -> tuple[DatasetSplit, DatasetSplit]:
    """Load train/test splits; pixel bytes are scaled to [0,1] float32."""
    dir_path = Path(dir_path)
    train_labels, train_images = [], []
    for fname in TRAIN_FILES:
        labels, images = read_batch_file(dir_path / fname)
        train_labels.append(labels)
        train_images.append(images)
    test_labels, test_images = read_batch_file(dir_path / TEST_FILE)
    train = DatasetSplit(
        Tensor(np.concatenate(train_images).astype(np.float32) / 255.0),
        np.concatenate(train_labels), "train")
    test = DatasetSplit(
        Tensor(test_images.astype(np.float32) / 255.0), test_labels, "test")
    return train, test


def resolve_data_dir(flag_value: str | None) -> Path:
    """Dataset directory from the CLI flag or the MIXRES_DATA_DIR env var."""
    value = flag_value or os.environ.get(DATA_DIR_ENV)
    if not value:
        raise DataError(
            f"no dataset directory: pass --data-dir or set {DATA_DIR_ENV}")
    path = Path(value)
    if not path.is_dir():
        raise DataError(f"dataset directory not found: {path}")
    return path


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def compute_norm_stats(train: DatasetSplit) -> NormStats:
    """Per-channel mean/std over every training pixel (population std)."""
    pixels = train.images.data.astype(np.float64)
    mean = pixels.mean(axis=(0, 2, 3))
    std = pixels.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        raise DataError(f"degenerate data: zero std in channel(s) {np.where(std <= 0)[0].tolist()}")
    return NormStats(mean=mean, std=std)


def normalize(split: DatasetSplit, stats: NormStats) -> DatasetSplit:
    x = split.images.data.astype(np.float64)
    x = (x - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    return DatasetSplit(Tensor(x.astype(np.float32)), split.labels, split.name)


def denormalize(split: DatasetSplit, stats: NormStats) -> DatasetSplit:
    x = split.images.data.astype(np.float64)
    x = x * stats.std[None, :, None, None] + stats.mean[None, :, None, None]
    return DatasetSplit(Tensor(x.astype(np.float32)), split.labels, split.name)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(split: DatasetSplit, batch_size: int, shuffle: bool = False,
               seed: Union[int, np.random.Generator, None] = 0,
               ) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (images, labels) batches covering each index exactly once.

    The final short batch is kept. With ``shuffle`` the order is a seeded
    deterministic permutation.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(split.images.data[idx]), split.labels[idx]


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

def synthetic_class_colors(num_classes: int, seed: int) -> np.ndarray:
    """Deterministic per-class RGB anchors, kept away from the [0,1] edges."""
    rng = np.random.default_rng([seed, 0xC01])
    return rng.uniform(0.15, 0.85, size=(num_classes, 3))


def synthetic_dataset(n: int, num_classes: int = NUM_CLASSES, seed: int = 0,
                      noise: float = 0.05, name: str = "synthetic",
                      color_seed: int | None = None) -> DatasetSplit:
    """Class-separable color blobs: constant per-class color plus pixel noise.

    Labels cycle 0..num_classes-1 so every class is represented; the whole
    split is deterministic for a given seed. A train/test pair must share
    ``color_seed`` (defaults to ``seed``) so both splits draw the same
    class-to-color mapping.
    """
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    colors = synthetic_class_colors(num_classes, seed if color_seed is None else color_seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    rng = np.random.default_rng([seed, 0xDA7A])
    images = np.repeat(colors[labels][:, :, None, None], 32, axis=2).repeat(32, axis=3)
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return DatasetSplit(Tensor(images), labels, name)


def write_synthetic_dataset_dir(dir_path: Union[str, Path], train_n: int = 256,
                                test_n: int = 64, seed: int = 0) -> Path:
    """Materialize a synthetic dataset as CIFAR-10 binary files for CLI runs.

    Train records are spread over the five data_batch files the loader
    expects; pixel floats are quantized to uint8.
    """
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    train = synthetic_dataset(train_n, seed=seed, color_seed=seed)
    test = synthetic_dataset(test_n, seed=seed + 1, color_seed=seed)
    per_file = (train_n + len(TRAIN_FILES) - 1) // len(TRAIN_FILES)
    for i, fname in enumerate(TRAIN_FILES):
        lo, hi = i * per_file, min((i + 1) * per_file, train_n)
        if lo >= hi:  # loader requires non-empty files
            lo, hi = 0, 1
        chunk = _to_uint8(train.images.data[lo:hi])
        (dir_path / fname).write_bytes(serialize_records(train.labels[lo:hi], chunk))
    (dir_path / TEST_FILE).write_bytes(
        serialize_records(test.labels, _to_uint8(test.images.data)))
    return dir_path


def _to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(images * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# PPM output (mixup previews)
# ---------------------------------------------------------------------------

def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    """Write one [3,H,W] float image in [0,1] as a binary P6 file."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"write_ppm expects [3,H,W], got {image.shape}")
    _, h, w = image.shape
    rgb = _to_uint8(image).transpose(1, 2, 0)  # H,W,3 interleaved
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
