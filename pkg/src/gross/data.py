"""CIFAR-10 binary ingestion, splitting, normalization and augmentation.

The binary batches hold fixed-size records: one label byte followed by
3,072 pixel bytes (a 32x32 red plane, then green, then blue, each row-major).
The 50,000 training records are shuffled with a fixed seed and cut into
40,000 train and 10,000 validation images. Pixels are scaled to [0, 1] and
then standardized per channel with the train split's mean and std.
"""

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataFormatError",
    "DatasetSplit",
    "Normalization",
    "RECORD_BYTES",
    "BATCH_RECORDS",
    "SPLIT_SEED",
    "read_batch",
    "load_cifar10",
    "compute_normalization",
    "augment",
    "augment_batch",
    "apply_augmentation",
    "iterate_batches",
    "write_batch",
    "write_synthetic_cifar10",
]

RECORD_BYTES = 1 + 3 * 32 * 32
BATCH_RECORDS = 10_000
SPLIT_SEED = 20_191_027
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
PAD = 2


class DataFormatError(ValueError):
    """A dataset file is missing, truncated or malformed."""


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, images_u8):
        x = images_u8.astype(np.float32) / np.float32(255.0)
        return (x - self.mean.reshape(1, 3, 1, 1)) / self.std.reshape(1, 3, 1, 1)


@dataclass
class DatasetSplit:
    """Normalized images ``(N, 3, 32, 32)`` float32 and labels ``(N,)`` int64."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    indices: np.ndarray = None
    normalization: Normalization = field(default=None, repr=False)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, n, seed=0):
        """First ``n`` items of a seeded permutation (the whole split if ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        order = np.sort(np.random.default_rng(seed).permutation(len(self))[:n])
        idx = None if self.indices is None else self.indices[order]
        return DatasetSplit(self.images[order], self.labels[order], self.name, idx, self.normalization)


def read_batch(path, records=BATCH_RECORDS):
    """Read one binary batch as ``(uint8 images (N, 3, 32, 32), int64 labels)``.

    ``records`` is the expected record count (``None`` accepts any whole
    number of records). Size and label problems raise
    :class:`DataFormatError` naming the byte offset.
    """
    if not os.path.isfile(path):
        raise DataFormatError(f"{path}: file not found")
    raw = np.fromfile(path, dtype=np.uint8)
    size = raw.size
    if size % RECORD_BYTES:
        whole = size // RECORD_BYTES
        raise DataFormatError(
            f"{path}: truncated record {whole} at byte offset {whole * RECORD_BYTES} "
            f"({size - whole * RECORD_BYTES} of {RECORD_BYTES} bytes present)"
        )
    n = size // RECORD_BYTES
    if records is not None and n != records:
        expected = records * RECORD_BYTES
        raise DataFormatError(
            f"{path}: {size} bytes, expected {expected}; data ends at byte offset {size}"
            if size < expected else f"{path}: {size} bytes, expected {expected}; extra data from byte offset {expected}"
        )
    raw = raw.reshape(n, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataFormatError(
            f"{path}: label {labels[bad[0]]} out of range at byte offset {bad[0] * RECORD_BYTES}"
        )
    return raw[:, 1:].reshape(n, 3, 32, 32), labels


def _resolve(directory):
    nested = os.path.join(directory, "cifar-10-batches-bin")
    if not os.path.isfile(os.path.join(directory, TEST_FILE)) and os.path.isdir(nested):
        return nested
    return directory


def compute_normalization(images_u8):
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return Normalization(mean.astype(np.float32), std.astype(np.float32))


def load_cifar10(directory, split_seed=SPLIT_SEED, val_size=10_000, records=BATCH_RECORDS):
    """Load CIFAR-10 and return ``(train, val, test)`` splits.

    ``directory`` may be the batch directory itself or its parent. Train and
    validation are a seeded partition of the five training batches; the
    normalization constants (train split only) are attached to every split.
    """
    directory = _resolve(directory)
    parts = [read_batch(os.path.join(directory, f), records) for f in TRAIN_FILES]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    test_images, test_labels = read_batch(os.path.join(directory, TEST_FILE), records)
    if not 0 < val_size < len(labels):
        raise ValueError(f"validation size {val_size} does not fit {len(labels)} training images")

    order = np.random.default_rng(split_seed).permutation(len(labels))
    train_idx, val_idx = np.sort(order[val_size:]), np.sort(order[:val_size])
    norm = compute_normalization(images[train_idx])
    train = DatasetSplit(norm.apply(images[train_idx]), labels[train_idx], "train", train_idx, norm)
    val = DatasetSplit(norm.apply(images[val_idx]), labels[val_idx], "val", val_idx, norm)
    test = DatasetSplit(norm.apply(test_images), test_labels, "test", np.arange(len(test_labels)), norm)
    return train, val, test


def apply_augmentation(images, flips, offsets):
    """Flip where ``flips`` is true, zero-pad by 2 and crop 32x32 at ``offsets``.

    ``offsets[i] = (dy, dx)`` is the crop's top-left corner in the 36x36
    padded canvas; ``(2, 2)`` with no flip is the identity. Padding uses
    zeros in the (normalized) value space.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images, flips, offsets = images[None], np.asarray([flips]), np.asarray([offsets])
    n, c, h, w = images.shape
    x = np.where(np.asarray(flips, bool).reshape(n, 1, 1, 1), images[..., ::-1], images)
    canvas = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD), dtype=images.dtype)
    canvas[:, :, PAD:PAD + h, PAD:PAD + w] = x
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(np.asarray(offsets, dtype=np.int64)):
        if not (0 <= dy <= 2 * PAD and 0 <= dx <= 2 * PAD):
            raise ValueError(f"crop offset {(dy, dx)} outside the padded canvas")
        out[i] = canvas[i, :, dy:dy + h, dx:dx + w]
    return out[0] if single else out


def augment(image, rng):
    """Random flip (p = 0.5) plus pad-2 random crop of one ``(3, 32, 32)`` image."""
    flip = rng.random() < 0.5
    offset = rng.integers(0, 2 * PAD + 1, size=2)
    return apply_augmentation(image, flip, offset)


def augment_batch(images, rng):
    n = images.shape[0]
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    return apply_augmentation(images, flips, offsets)


def iterate_batches(split, batch_size, rng=None, shuffle=True, augment_fn=None):
    """Yield ``(images, labels)`` mini-batches; the last one may be short."""
    n = len(split)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = split.images[idx]
        if augment_fn is not None:
            x = augment_fn(x, rng)
        yield x, split.labels[idx]


def write_batch(path, images_u8, labels):
    """Write images and labels in the binary batch format."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    if images_u8.shape[1] != RECORD_BYTES - 1:
        raise ValueError("images must be 3x32x32")
    rec = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images_u8
    rec.tofile(path)


def write_synthetic_cifar10(directory, records=BATCH_RECORDS, seed=0, noise=48.0):
    """Write a learnable stand-in dataset in the CIFAR-10 binary layout.

    Each class is a fixed random low-frequency colour pattern; samples add
    pixel noise and a random shift. Used for pipeline tests only.
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0, 255, size=(10, 3, 4, 4))
    protos = coarse.repeat(8, axis=2).repeat(8, axis=3)
    for name in TRAIN_FILES + (TEST_FILE,):
        labels = rng.integers(0, 10, size=records)
        shifts = rng.integers(-3, 4, size=(records, 2))
        imgs = protos[labels]
        imgs = np.stack([np.roll(im, tuple(sh), axis=(1, 2)) for im, sh in zip(imgs, shifts)])
        imgs = np.clip(imgs + rng.normal(0, noise, size=imgs.shape), 0, 255).astype(np.uint8)
        write_batch(os.path.join(directory, name), imgs, labels)
    return directory
