"""Local dataset loading: MNIST idx files, CIFAR-10 pickle batches, and the
8x8 digits set bundled with scikit-learn.

Images are returned as uint8 arrays of shape (n, channels, h, w) with raw
0..255 values; the export pipeline applies the engine's pixel scaling.
Returns None when the files are not present; nothing is ever downloaded.
"""

from __future__ import annotations

import gzip
import pickle
import struct
from pathlib import Path

import numpy as np


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        magic, = struct.unpack(">I", fh.read(4))
        ndim = magic & 0xFF
        dims = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    return data.reshape(dims)


def _find_idx(directory: Path, stem: str) -> Path | None:
    for suffix in ("", ".gz"):
        cand = directory / (stem + suffix)
        if cand.exists():
            return cand
    return None


def load_mnist(data_dir) -> tuple | None:
    directory = Path(data_dir) / "mnist"
    names = (
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    )
    paths = [_find_idx(directory, n) for n in names]
    if any(p is None for p in paths):
        return None
    xtr, ytr, xte, yte = (_read_idx(p) for p in paths)
    return (
        xtr[:, None, :, :],
        ytr.astype(np.int64),
        xte[:, None, :, :],
        yte.astype(np.int64),
    )


def load_cifar10(data_dir) -> tuple | None:
    directory = Path(data_dir) / "cifar-10-batches-py"
    batches = [directory / f"data_batch_{i}" for i in range(1, 6)]
    test = directory / "test_batch"
    if not test.exists() or not all(b.exists() for b in batches):
        return None

    def read(path):
        with open(path, "rb") as fh:
            entry = pickle.load(fh, encoding="bytes")
        images = entry[b"data"].reshape(-1, 3, 32, 32)
        labels = np.asarray(entry[b"labels"], dtype=np.int64)
        return images, labels

    parts = [read(b) for b in batches]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read(test)
    return xtr, ytr, xte, yte


def load_digits() -> tuple | None:
    """scikit-learn's bundled 1797-sample 8x8 digit set, rescaled to 0..255."""
    try:
        from sklearn.datasets import load_digits as _load
    except ImportError:
        return None
    bunch = _load()
    # 17 gray levels (0..16); quantize to uint8 before any normalization so
    # saved PGM samples reproduce the training inputs exactly
    images = np.round(bunch.images / 16.0 * 255.0).astype(np.uint8)[:, None, :, :]
    labels = bunch.target.astype(np.int64)
    rng = np.random.default_rng(4242)
    order = rng.permutation(len(labels))
    images, labels = images[order], labels[order]
    split = int(0.8 * len(labels))
    return images[:split], labels[:split], images[split:], labels[split:]


def load_dataset(name: str, data_dir) -> tuple | None:
    if name == "mnist":
        return load_mnist(data_dir) if data_dir else None
    if name == "cifar10":
        return load_cifar10(data_dir) if data_dir else None
    if name == "digits":
        return load_digits()
    raise ValueError(f"unknown dataset {name!r}")
