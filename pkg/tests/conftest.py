"""Shared fixtures: synthetic datasets and raw data-file writers."""

import os
import struct

import numpy as np
import pytest

from bnn.data import Dataset

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def mnist_dir():
    """Directory holding the real MNIST IDX files, if available."""
    d = os.environ.get("BNN_MNIST_DIR", os.path.join(REPO_ROOT, "data", "mnist"))
    return d if os.path.isdir(d) else None


def cifar_dir():
    d = os.environ.get("BNN_CIFAR_DIR", os.path.join(REPO_ROOT, "data", "cifar10"))
    return d if os.path.isdir(d) else None


def make_synth_dataset(n, class_count=10, shape=(1, 28, 28), seed=0,
                       split="train"):
    """Linearly separable synthetic images: class l gets a bright patch."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, class_count, n).astype(np.int64)
    imgs = rng.standard_normal((n,) + shape).astype(np.float32) * 0.1
    for i, l in enumerate(labels):
        imgs[i, 0, l: l + 3, l: l + 3] += 2.0
    c = shape[0]
    return Dataset(
        images=imgs, labels=labels, split=split, class_count=class_count,
        norm_mean=np.zeros(c, dtype=np.float32),
        norm_std=np.ones(c, dtype=np.float32),
    )


@pytest.fixture
def synth_pair():
    return make_synth_dataset(240, seed=1), make_synth_dataset(80, seed=2,
                                                               split="test")


def write_idx_images(path, images):
    """images: uint8 (N, rows, cols)."""
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def write_mnist_dir(directory, n_train=64, n_test=32, seed=0):
    """A miniature but structurally valid MNIST directory."""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)

    def make(n):
        labels = rng.integers(0, 10, n).astype(np.uint8)
        imgs = (rng.random((n, 28, 28)) * 40).astype(np.uint8)
        for i, l in enumerate(labels):
            imgs[i, l: l + 6, l: l + 6] = 250
        return imgs, labels

    tr_x, tr_y = make(n_train)
    te_x, te_y = make(n_test)
    write_idx_images(os.path.join(directory, "train-images-idx3-ubyte"), tr_x)
    write_idx_labels(os.path.join(directory, "train-labels-idx1-ubyte"), tr_y)
    write_idx_images(os.path.join(directory, "t10k-images-idx3-ubyte"), te_x)
    write_idx_labels(os.path.join(directory, "t10k-labels-idx1-ubyte"), te_y)
    return directory


def write_cifar_batch(path, n, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, (n, 1)).astype(np.uint8)
    pixels = rng.integers(0, 256, (n, 3 * 32 * 32)).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(np.concatenate([labels, pixels], axis=1).tobytes())


def write_cifar_dir(directory, per_batch=20, seed=0):
    os.makedirs(directory, exist_ok=True)
    for i in range(1, 6):
        write_cifar_batch(os.path.join(directory, f"data_batch_{i}.bin"),
                          per_batch, seed=seed + i)
    write_cifar_batch(os.path.join(directory, "test_batch.bin"),
                      per_batch, seed=seed + 6)
    return directory
