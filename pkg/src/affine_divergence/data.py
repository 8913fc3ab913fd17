"""CIFAR-10 binary I/O, synthetic Gaussian datasets, and seeded minibatching."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DTYPE, Rng

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) int
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def images(self):
        """Conv view ``(N, C, H, W)``."""
        if self.image_shape is None:
            raise ValueError("dataset has no image shape")
        return self.features.reshape((len(self),) + tuple(self.image_shape))

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.image_shape)


def read_cifar_bin(path) -> Dataset:
    """Read one file of 3073-byte records: label byte then 3072 channel-planar pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise DatasetFormatError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetFormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    features = rec[:, 1:].astype(DTYPE) / 255.0
    return Dataset(features, labels, IMAGE_SHAPE)


def quantize(features) -> np.ndarray:
    return np.round(np.clip(features, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_cifar_bin(ds: Dataset, path):
    """Write ``ds`` in the CIFAR-10 record layout; features are clipped to [0, 1] and quantised."""
    if ds.features.shape[1] != RECORD_BYTES - 1:
        raise DatasetFormatError(f"CIFAR records hold {RECORD_BYTES - 1} pixels, got {ds.features.shape[1]}")
    if ds.labels.size and (ds.labels.min() < 0 or ds.labels.max() > 9):
        raise DatasetFormatError("labels must lie in 0..9")
    rec = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = ds.labels
    rec[:, 1:] = quantize(ds.features)
    rec.tofile(path)


def data_dir(path=None) -> Path:
    root = Path(path or os.environ.get("DATA_DIR", "data"))
    nested = root / "cifar-10-batches-bin"
    return nested if nested.is_dir() else root


def load_cifar10(path=None, standardize: bool = False):
    """Load ``(train, test)`` from a directory of the five train batches and the test batch."""
    root = data_dir(path)
    missing = [f for f in TRAIN_FILES + [TEST_FILE] if not (root / f).is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {root}: {', '.join(missing)}")
    parts = [read_cifar_bin(root / f) for f in TRAIN_FILES]
    train = Dataset(np.concatenate([p.features for p in parts]),
                    np.concatenate([p.labels for p in parts]), IMAGE_SHAPE)
    test = read_cifar_bin(root / TEST_FILE)
    if standardize:
        train, test = standardize_channels(train, test)
    return train, test


def standardize_channels(train: Dataset, test: Dataset):
    """Per-channel standardisation with statistics from the training split."""
    img = train.images
    mu = img.mean(axis=(0, 2, 3), keepdims=True)
    sd = img.std(axis=(0, 2, 3), keepdims=True)

    def apply(ds):
        return Dataset(((ds.images - mu) / sd).reshape(len(ds), -1), ds.labels, ds.image_shape)

    return apply(train), apply(test)


def simplex_means(classes: int, dim: int, scale: float) -> np.ndarray:
    """Class means at scaled standard-simplex vertices, centred at the origin.

    When ``dim < classes`` vertex ``c`` is folded onto axis ``c % dim``.
    """
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes) % dim] = scale
    means -= means.mean(axis=0)
    return means


def synthetic_gaussian(n: int, dim: int, classes: int = 10, seed: int = 0, scale: float = 3.0,
                       image_shape=None, split: int = 0) -> Dataset:
    """Class-conditional unit-covariance Gaussians on a scaled simplex.

    ``classes=1`` gives a standard multivariate normal.  Different ``split``
    values draw fresh samples around the same means (e.g. train vs test).
    """
    rng = Rng(seed, 0xDA7A, split)
    labels = rng.integers(0, classes, n) if classes > 1 else np.zeros(n, dtype=np.int64)
    means = simplex_means(classes, dim, scale)
    features = means[labels] + rng.normal((n, dim))
    if image_shape is None and dim == int(np.prod(IMAGE_SHAPE)):
        image_shape = IMAGE_SHAPE
    return Dataset(features, labels, image_shape)


@dataclass
class BatchPlan:
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def permutation(self, n: int, epoch: int) -> np.ndarray:
        return Rng(self.seed, 0xBA7C, epoch).permutation(n)


def batches(ds: Dataset, plan: BatchPlan, epoch: int, images: bool = False):
    """Shuffled minibatches for one epoch; the final partial batch is kept."""
    order = plan.permutation(len(ds), epoch)
    X = ds.images if images else ds.features
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield X[idx], ds.labels[idx]
