"""Desk-scale datasets.

MNIST is read from standard IDX files when ``FPKIT_DATA`` (or ``data_dir``)
points at a directory holding them; see ``scripts/fetch_mnist.py``. Without
those files the 5,000-image MNIST subset bundled with mlxtend is used. The
sibling "limited surrogate data" set is the sklearn 8x8 digits corpus, upsampled
and padded to MNIST's 28x28 framing (a USPS-style stand-in).
"""

from __future__ import annotations

import gzip
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .nnkit import DatasetBundle, LabeledSet

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def read_idx(path) -> np.ndarray:
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _find_idx(data_dir) -> Optional[Path]:
    if data_dir is None:
        return None
    d = Path(data_dir)
    name = IDX_FILES["train"][0]
    if (d / name).exists() or (d / f"{name}.gz").exists():
        return d
    return None


def load_mnist_arrays(data_dir=None) -> tuple[np.ndarray, np.ndarray]:
    """All available MNIST images as (N, 28, 28) floats in [0, 1] plus labels."""
    d = _find_idx(data_dir or os.environ.get("FPKIT_DATA"))
    if d is not None:
        xs, ys = [], []
        for imgs, labels in IDX_FILES.values():
            xs.append(read_idx(d / imgs))
            ys.append(read_idx(d / labels))
        x, y = np.concatenate(xs), np.concatenate(ys)
    else:
        from mlxtend.data import mnist_data

        x, y = mnist_data()
        x = x.reshape(-1, 28, 28)
    return (x / 255.0).astype(np.float32), y.astype(np.int64)


def load_digits_as_mnist() -> tuple[np.ndarray, np.ndarray]:
    """sklearn 8x8 digits resized to a 20x20 glyph centred in a 28x28 frame."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = torch.from_numpy(d.images.astype(np.float32) / 16.0)[:, None]
    x = F.interpolate(x, size=(20, 20), mode="bilinear", align_corners=False)
    x = F.pad(x, (4, 4, 4, 4)).clamp_(0.0, 1.0)
    return x[:, 0].numpy(), d.target.astype(np.int64)


def stratified_indices(labels: np.ndarray, n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` indices with per-class counts differing by at most one.

    The remainder ``n mod K`` goes to a random set of classes.
    """
    labels = np.asarray(labels)
    if n > len(labels):
        raise ValueError(f"requested {n} samples from a pool of {len(labels)}")
    base, extra = divmod(n, num_classes)
    quota = np.full(num_classes, base)
    quota[rng.permutation(num_classes)[:extra]] += 1
    chosen = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        if quota[c] > len(members):
            raise ValueError(f"class {c} has {len(members)} samples, {quota[c]} requested")
        chosen.append(rng.permutation(members)[: quota[c]])
    return np.sort(np.concatenate(chosen))


def to_set(x: np.ndarray, y: np.ndarray) -> LabeledSet:
    x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    if x.ndim == 3:
        x = x[:, None]
    return LabeledSet(x, torch.from_numpy(np.asarray(y, dtype=np.int64)))


def mnist_bundle(scenario: str = "ltd", substitute_ratio: float = 0.1, test_size: int = 1000,
                 seed: int = 0, data_dir=None, num_classes: int = 10) -> DatasetBundle:
    """MNIST train/test split plus an attacker substitute set.

    ``scenario="ltd"`` draws the substitute set from the training split
    (limited training data); ``"lsd"`` draws it from the digits sibling
    corpus (limited surrogate data). ``substitute_ratio`` is relative to the
    training split size in both cases.
    """
    from .probes import select_substitute

    x, y = load_mnist_arrays(data_dir)
    rng = np.random.default_rng(seed)
    test_idx = stratified_indices(y, test_size, num_classes, rng)
    train_mask = np.ones(len(y), dtype=bool)
    train_mask[test_idx] = False
    train = to_set(x[train_mask], y[train_mask])
    test = to_set(x[test_idx], y[test_idx])
    count = max(num_classes, int(round(substitute_ratio * len(train))))
    if scenario == "ltd":
        pool = train
    elif scenario == "lsd":
        pool = to_set(*load_digits_as_mnist())
    else:
        raise ValueError(f"unknown scenario {scenario!r}; use 'ltd' or 'lsd'")
    substitute = select_substitute(pool, count, seed=seed + 1, num_classes=num_classes)
    return DatasetBundle(train=train, test=test, substitute=substitute, class_count=num_classes,
                         name=f"mnist-{scenario}-{substitute_ratio:g}")
