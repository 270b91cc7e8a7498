"""Dataset ingestion: IDX image/label files and synthetic Gaussian blobs.

IDX is the classic big-endian format (magic 0x00000803 for image files,
0x00000801 for label files). Pixels are scaled to [0, 1] by /255.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset", "DatasetFormatError", "BadMagicError", "TruncatedFileError",
    "CountMismatchError", "load_mnist_idx", "load_idx_images",
    "load_idx_labels", "synth_dataset",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for split, (x, y) in (("train", (self.x_train, self.y_train)),
                              ("test", (self.x_test, self.y_test))):
            x = np.asarray(x, dtype=np.float64)
            y = np.asarray(y, dtype=np.int64)
            if x.shape[0] != y.shape[0]:
                raise ValueError(f"{split}: {x.shape[0]} inputs vs {y.shape[0]} labels")
            if x.size and (x.min() < 0.0 or x.max() > 1.0):
                raise ValueError(f"{split}: features outside [0, 1]")
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{split}: label out of range for "
                                 f"{self.num_classes} classes")
            setattr(self, f"x_{split}", x)
            setattr(self, f"y_{split}", y)

    @property
    def input_dim(self):
        return self.x_train.shape[1] if self.x_train.size else self.x_test.shape[1]

    def subset(self, n_train=None, n_test=None):
        """Leading-slice subset (deterministic); None keeps a split whole."""
        nt = self.x_train.shape[0] if n_train is None else min(n_train, self.x_train.shape[0])
        ne = self.x_test.shape[0] if n_test is None else min(n_test, self.x_test.shape[0])
        return Dataset(self.name, self.x_train[:nt], self.y_train[:nt],
                       self.x_test[:ne], self.y_test[:ne], self.num_classes,
                       dict(self.provenance, subset=[nt, ne]))


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(
            f"{path}: truncated while reading {what} "
            f"(wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx_images(path):
    """Parse an IDX image file into a (count, rows*cols) float array in [0,1]."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, path, "image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise BadMagicError(
                f"{path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IMAGE_MAGIC:08x})")
        raw = _read_exact(fh, count * rows * cols, path, f"{count} images")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows * cols)


def load_idx_labels(path):
    """Parse an IDX label file into an int array."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, path, "label header")
        magic, count = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise BadMagicError(
                f"{path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{LABEL_MAGIC:08x})")
        raw = _read_exact(fh, count, path, f"{count} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(image_path, label_path):
    """Load one IDX image/label pair with consistency checks.

    Returns (features, labels) with pixels in [0, 1]; the two files must
    agree on the example count.
    """
    x = load_idx_images(image_path)
    y = load_idx_labels(label_path)
    if x.shape[0] != y.shape[0]:
        raise CountMismatchError(
            f"{image_path} has {x.shape[0]} images but {label_path} "
            f"has {y.shape[0]} labels")
    return x, y


def idx_dataset(train_images, train_labels, test_images, test_labels,
                name="mnist", num_classes=10):
    """Dataset from four IDX paths (train pair + test pair)."""
    xtr, ytr = load_mnist_idx(train_images, train_labels)
    xte, yte = load_mnist_idx(test_images, test_labels)
    prov = {"kind": "idx", "train_images": str(train_images),
            "train_labels": str(train_labels), "test_images": str(test_images),
            "test_labels": str(test_labels)}
    return Dataset(name, xtr, ytr, xte, yte, num_classes, prov)


def synth_dataset(classes=2, dims=2, separation=4.0, n=1000, seed=0,
                  name="synthetic"):
    """Gaussian blobs in [0, 1]^dims, 80/20 train/test, deterministic per seed.

    Class means sit evenly on a circle in the first two feature dims at
    radius 0.08 * separation around 0.5; within-class noise has std 0.08
    and everything is clipped to the unit box. separation = 0 makes the
    class-conditional distributions identical.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if dims < 2:
        raise ValueError("need at least two feature dims")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(classes) / classes
    means = np.full((classes, dims), 0.5)
    radius = 0.08 * separation
    means[:, 0] += radius * np.cos(angles)
    means[:, 1] += radius * np.sin(angles)
    y = rng.integers(0, classes, size=n)
    x = np.clip(means[y] + rng.normal(0.0, 0.08, (n, dims)), 0.0, 1.0)
    n_train = int(round(0.8 * n))
    prov = {"kind": "synthetic", "classes": classes, "dims": dims,
            "separation": separation, "n": n, "seed": seed}
    return Dataset(name, x[:n_train], y[:n_train], x[n_train:], y[n_train:],
                   classes, prov)
