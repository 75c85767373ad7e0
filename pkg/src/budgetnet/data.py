"""CIFAR-10 binary ingestion, channel statistics, augmentation and batching.

Binary layout: each record is 3073 bytes, one label byte followed by
1024 red, 1024 green and 1024 blue bytes in row-major order.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from budgetnet.errors import DataError, DegenerateError, FormatError, UsageError

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
PAD = 4
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray  # (n, 3, 32, 32) uint8
    labels: np.ndarray  # (n,) int64
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise DataError(f"images must be (n, 3, 32, 32), got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise DataError("images must be uint8")
        if len(self.labels) != len(self.images):
            raise DataError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise DataError("labels must lie in [0, 10)")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (3,) or self.std.shape != (3,):
            raise DataError("norm stats need 3 means and 3 stds")
        if np.any(self.std <= 0):
            raise DegenerateError("channel std must be positive")

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.ones(3))


def parse_batch(raw):
    """Parse the bytes of one batch file into ``(images, labels)``."""
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise FormatError(f"batch size {len(raw)} bytes is not a positive multiple of {RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"record {bad}: label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).copy()
    return images, labels


def serialize_batch(images, labels):
    n = len(labels)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(n, -1)
    return out.tobytes()


def read_batch_file(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return parse_batch(raw)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_batch_file(path, images, labels):
    Path(path).write_bytes(serialize_batch(images, labels))


def load_cifar10(directory):
    """Load the five training batches and the test batch from ``directory``."""
    directory = Path(directory)
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not (directory / f).is_file()]
    if missing:
        raise DataError(f"{directory}: missing CIFAR-10 files {', '.join(missing)}")
    parts = [read_batch_file(directory / f) for f in TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), "train")
    test = Dataset(*read_batch_file(directory / TEST_FILE), split="test")
    return train, test


def cifar10_available(directory):
    return directory is not None and all(
        os.path.isfile(os.path.join(directory, f)) for f in TRAIN_FILES + (TEST_FILE,)
    )


def channel_stats(dataset):
    """Population mean and std per channel of the [0, 1]-scaled images."""
    imgs = dataset.images
    if imgs.shape[0] * imgs.shape[2] * imgs.shape[3] < 2:
        raise DegenerateError("need at least 2 pixels per channel")
    mean, std, flat = np.zeros(3), np.zeros(3), []
    for c in range(3):
        raw = imgs[:, c].ravel()
        # exact integer test for a constant channel; float variance can be ~1e-17 instead of 0
        if raw.min() == raw.max():
            flat.append(c)
            continue
        x = raw.astype(np.float64) / 255.0
        mean[c] = x.mean()
        std[c] = np.sqrt(np.mean((x - mean[c]) ** 2))
    if flat:
        raise DegenerateError(f"zero variance in channel(s) {flat}")
    return NormStats(mean, std)


def normalize(images, stats, dtype=np.float32):
    """uint8 images (n, 3, H, W) -> scaled and standardised floats."""
    x = images.astype(np.float64) / 255.0
    x = (x - stats.mean.reshape(1, 3, 1, 1)) / stats.std.reshape(1, 3, 1, 1)
    return x.astype(dtype)


def denormalize(x, stats):
    """Inverse of :func:`normalize`, returning values on the [0, 1] scale."""
    return np.asarray(x, dtype=np.float64) * stats.std.reshape(1, 3, 1, 1) + stats.mean.reshape(1, 3, 1, 1)


def draw_augmentation(rng):
    """Random choices for one image, in fixed order: crop dy, crop dx, flip."""
    dy = int(rng.integers(0, 2 * PAD + 1))
    dx = int(rng.integers(0, 2 * PAD + 1))
    flip = bool(rng.random() < 0.5)
    return dy, dx, flip


def apply_augmentation(image, dy, dx, flip):
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * PAD, w + 2 * PAD), dtype=image.dtype)
    padded[:, PAD : PAD + h, PAD : PAD + w] = image
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image, rng):
    """Zero-pad by 4, random 32x32 crop, horizontal flip with probability 0.5."""
    return apply_augmentation(image, *draw_augmentation(rng))


def num_batches(n, batch_size):
    return -(-n // batch_size)


def _assemble(images, labels, stats, dtype, choices):
    if choices is not None:
        images = np.stack([apply_augmentation(img, *ch) for img, ch in zip(images, choices)])
    return normalize(images, stats, dtype), labels


def batches(dataset, batch_size, shuffle=False, rng=None, stats=None, augment=False,
            workers=0, dtype=np.float32):
    """Yield ``(x, labels)`` batches; the last partial batch is kept.

    All random draws (permutation, then per-image crop/flip) happen on the
    calling thread in a fixed order, so ``workers`` only changes how fast the
    pixels are assembled, never which batches come out.
    """
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot batch an empty dataset")
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    if (shuffle or augment) and rng is None:
        raise UsageError("shuffle/augment need an rng")
    stats = stats or NormStats.identity()
    order = rng.permutation(n) if shuffle else np.arange(n)

    def plan():
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            choices = [draw_augmentation(rng) for _ in idx] if augment else None
            yield dataset.images[idx], dataset.labels[idx], choices

    if workers <= 0:
        for imgs, labels, choices in plan():
            yield _assemble(imgs, labels, stats, dtype, choices)
        return

    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = []
        for imgs, labels, choices in plan():
            pending.append(pool.submit(_assemble, imgs, labels, stats, dtype, choices))
            if len(pending) > workers:
                yield pending.pop(0).result()
        for fut in pending:
            yield fut.result()
