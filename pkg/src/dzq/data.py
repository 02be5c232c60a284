"""Dataset loading: IDX image files, labelled CSV, synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Standard per-pixel normalization constants for 28x28 digit images.
PIXEL_MEAN = 0.1307
PIXEL_STD = 0.3081


@dataclass
class Dataset:
    """Features with integer labels plus the affine normalization applied."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature/label counts differ")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self):
        return self.features.shape[0]


def _read_exact(fh, count, path):
    blob = fh.read(count)
    if len(blob) != count:
        raise IOError(f"{path}: truncated file, wanted {count} bytes, "
                      f"got {len(blob)}")
    return blob


def load_idx(images_path, labels_path, normalize=True):
    """Load big-endian IDX image/label files into a Dataset.

    Pixels are scaled to [0, 1] and, when normalize is set, standardized with
    the usual digit-image constants (recorded on the Dataset).
    """
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII",
                                                 _read_exact(fh, 16, images_path))
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}, "
                              f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, images_path)
        if fh.read(1):
            raise FormatError(f"{images_path}: trailing bytes after pixel data")
    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path))
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: bad label magic 0x{magic:08x}, "
                              f"expected 0x{IDX_LABELS_MAGIC:08x}")
        if label_count != count:
            raise FormatError(f"{labels_path}: {label_count} labels for "
                              f"{count} images")
        labels = np.frombuffer(_read_exact(fh, label_count, labels_path),
                               dtype=np.uint8).astype(np.int64)
        if fh.read(1):
            raise FormatError(f"{labels_path}: trailing bytes after label data")

    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    pixels = pixels.reshape(count, rows, cols) / 255.0
    if normalize:
        pixels = (pixels - PIXEL_MEAN) / PIXEL_STD
        mean, std = PIXEL_MEAN, PIXEL_STD
    else:
        mean, std = 0.0, 1.0
    return Dataset(features=pixels, labels=labels, num_classes=10,
                   norm_mean=mean, norm_std=std)


def load_csv(path):
    """Load a CSV whose first column is an integer label.

    A header line is detected by a non-numeric first cell and skipped.
    """
    with open(path) as fh:
        first = fh.readline()
        if not first.strip():
            raise FormatError(f"{path}: empty file")
        cell = first.split(",")[0].strip()
        try:
            float(cell)
            skip = 0
        except ValueError:
            skip = 1
    table = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    labels = table[:, 0]
    if not np.allclose(labels, np.round(labels)):
        raise FormatError(f"{path}: first column must hold integer labels")
    labels = labels.astype(np.int64)
    if labels.min() < 0:
        raise FormatError(f"{path}: negative label")
    return Dataset(features=table[:, 1:], labels=labels,
                   num_classes=int(labels.max()) + 1)


def synthetic_blobs(n, dims, classes, spread=0.1, seed=0):
    """Gaussian clusters at random centers; class i gets samples i, i+k, ..."""
    if n < classes or classes < 1 or dims < 1:
        raise ValueError("need n >= classes >= 1 and dims >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1.0, 1.0, size=(classes, dims))
    labels = np.arange(n, dtype=np.int64) % classes
    features = centers[labels] + spread * rng.standard_normal((n, dims))
    return Dataset(features=features, labels=labels, num_classes=int(classes))


def split(dataset, fraction, seed=0):
    """Deterministically split off a validation fraction; returns (train, val)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    make = lambda idx: Dataset(features=dataset.features[idx],
                               labels=dataset.labels[idx],
                               num_classes=dataset.num_classes,
                               norm_mean=dataset.norm_mean,
                               norm_std=dataset.norm_std)
    return make(train_idx), make(val_idx)


def batches(dataset, batch_size, shuffle_seed=None):
    """Yield (features, labels) batches covering every sample exactly once.

    The last batch may be short.  With a shuffle_seed the order is the
    deterministic permutation of that seed; without one, insertion order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.features[idx], dataset.labels[idx]
