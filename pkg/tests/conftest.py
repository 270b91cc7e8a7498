"""Shared fixtures.

The IDX fixtures are written by an independent struct-based writer (not
the package's own serializer), so the parser is tested against a second
implementation of the format. The digits dataset is scikit-learn's
bundled 8x8 handwritten-digits set exported to real IDX files — the
desk-scale stand-in used throughout; point ORLAB_MNIST_DIR at the
canonical MNIST files to run the same suites on the real thing.
"""

import os
import struct
from pathlib import Path

import numpy as np
import pytest

from orlab import data, nn


def write_idx_images(path, images):
    """Independent IDX image writer: big-endian header + raw uint8 pixels."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        fh.write(labels.tobytes())


@pytest.fixture(scope="session")
def digits_idx_dir(tmp_path_factory):
    """Four IDX files holding the handwritten-digits set (or MNIST if set)."""
    env = os.environ.get("ORLAB_MNIST_DIR")
    if env:
        return Path(env)
    from sklearn.datasets import load_digits

    raw = load_digits()
    # 0..16 ink scale stretched to 0..255 so the loader's /255 recovers [0,1]
    images = np.round(raw.images / 16.0 * 255.0).astype(np.uint8)
    labels = raw.target.astype(np.uint8)
    n_train = 1300
    out = tmp_path_factory.mktemp("digits_idx")
    write_idx_images(out / "train-images-idx3-ubyte", images[:n_train])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[:n_train])
    write_idx_images(out / "t10k-images-idx3-ubyte", images[n_train:])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[n_train:])
    return out


@pytest.fixture(scope="session")
def digits_dataset(digits_idx_dir):
    d = digits_idx_dir
    ds = data.idx_dataset(d / "train-images-idx3-ubyte",
                          d / "train-labels-idx1-ubyte",
                          d / "t10k-images-idx3-ubyte",
                          d / "t10k-labels-idx1-ubyte",
                          name="digits")
    if os.environ.get("ORLAB_MNIST_DIR"):
        ds = ds.subset(8000, 2000)
    return ds


@pytest.fixture(scope="session")
def digits_model(digits_dataset):
    """Clean float64 classifier reused by defense/attack/acceptance tests."""
    ds = digits_dataset
    model = nn.mlp([ds.input_dim, 64, 32, ds.num_classes], seed=7)
    trained, _ = nn.train(model, ds.x_train, ds.y_train,
                          nn.TrainConfig(iterations=2500, batch_size=64,
                                         learning_rate=0.1, seed=7))
    return trained


def make_blobs(seed=0, n=800, separation=4.5):
    return data.synth_dataset(classes=2, dims=2, separation=separation,
                              n=n, seed=seed)


@pytest.fixture(scope="session")
def blobs_model():
    """Tiny 2-class model on well-separated blobs, for attack unit tests."""
    ds = make_blobs(seed=3)
    model = nn.mlp([2, 16, 2], seed=3)
    trained, _ = nn.train(model, ds.x_train, ds.y_train,
                          nn.TrainConfig(iterations=800, batch_size=32,
                                         learning_rate=0.2, seed=3))
    return trained, ds
