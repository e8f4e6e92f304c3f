"""Dataset ingestion and generation.

CIFAR-10 is read from the standard binary layout: per record one label
byte followed by 3072 pixel bytes (32x32, row-major, R then G then B
planes), 10,000 records per file, five train files plus one test file.

The synthetic generator builds Gaussian class clusters on a simplex with
per-tier separation scales, so "easy" and "hard" subsets exist by
construction and early-exit behavior can be studied without real data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD_BYTES = 1 + 3072
CIFAR_RECORDS_PER_FILE = 10_000


class DataFormatError(ValueError):
    """Input files do not match the documented binary layout."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W), uint8 or float32
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int
    split: str  # train | val
    tiers: Optional[np.ndarray] = None  # difficulty tier per image, if known

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if len(self.images) == 0:
            raise DataFormatError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(
                f"labels outside [0, {self.num_classes}): "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# CIFAR-10 binary layout
# ---------------------------------------------------------------------------


def _read_cifar_file(path: str) -> tuple:
    if not os.path.exists(path):
        raise DataFormatError(f"missing CIFAR-10 file: {path}")
    expected = CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE
    size = os.path.getsize(path)
    if size != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes ({CIFAR_RECORDS_PER_FILE} records of "
            f"{CIFAR_RECORD_BYTES}), found {size}"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(CIFAR_RECORDS_PER_FILE, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} > 9")
    images = raw[:, 1:].reshape(CIFAR_RECORDS_PER_FILE, 3, 32, 32)
    return images, labels


def load_cifar10(directory: str) -> tuple:
    """(train, val) datasets from the six standard binary batch files."""
    train_images, train_labels = [], []
    for name in CIFAR_TRAIN_FILES:
        images, labels = _read_cifar_file(os.path.join(directory, name))
        train_images.append(images)
        train_labels.append(labels)
    val_images, val_labels = _read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))
    train = Dataset(
        np.concatenate(train_images), np.concatenate(train_labels), 10, "train"
    )
    val = Dataset(val_images, val_labels, 10, "val")
    return train, val


def write_cifar_batch(path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write records in the CIFAR-10 binary layout (testing / tooling)."""
    if images.dtype != np.uint8 or images.shape[1:] != (3, 32, 32):
        raise DataFormatError("expected uint8 images of shape (N, 3, 32, 32)")
    n = len(labels)
    rec = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images.reshape(n, 3072)
    rec.tofile(path)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augment_batch(
    images: np.ndarray,
    rng: np.random.Generator,
    mode: str = "pad-crop",
    pad: int = 4,
) -> np.ndarray:
    """Train-time augmentation for 32x32 images; outputs float32 in [0, 1].

    pad-crop (default): zero-pad `pad` pixels per side, random 32x32 crop,
    then horizontal flip with probability 0.5. resize-crop is the literal
    alternative reading: nearest-neighbor upsample to 40x40 then crop.
    """
    if images.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"augmentation expects (N, 3, 32, 32), got {images.shape}")
    n = len(images)
    x = images.astype(np.float32)
    if images.dtype == np.uint8:
        x /= 255.0
    if mode == "pad-crop":
        canvas = np.zeros((n, 3, 32 + 2 * pad, 32 + 2 * pad), dtype=np.float32)
        canvas[:, :, pad : pad + 32, pad : pad + 32] = x
        max_off = 2 * pad
    elif mode == "resize-crop":
        idx = (np.arange(40) * 32) // 40  # nearest-neighbor 32 -> 40
        canvas = x[:, :, idx][:, :, :, idx]
        max_off = 40 - 32
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    offs = rng.integers(0, max_off + 1, size=(n, 2))
    out = np.empty_like(x)
    for i in range(n):
        oi, oj = offs[i]
        out[i] = canvas[i, :, oi : oi + 32, oj : oj + 32]
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    return out


def augment_train(image: np.ndarray, rng: np.random.Generator, mode: str = "pad-crop") -> np.ndarray:
    """Single-image convenience wrapper around augment_batch."""
    return augment_batch(image[None], rng, mode=mode)[0]


# ---------------------------------------------------------------------------
# synthetic tiered data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    shape: tuple  # (C, H, W)
    tier_separations: tuple  # strictly decreasing positive scales, easy -> hard
    samples_per_tier: int
    seed: int
    modes_per_class: int = 1  # >1 spreads each class over several simplex vertices

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if len(self.shape) != 3 or any(d < 1 for d in self.shape):
            raise ValueError(f"bad image shape {self.shape}")
        seps = self.tier_separations
        if len(seps) == 0 or any(s <= 0 for s in seps):
            raise ValueError("tier separations must be positive")
        if any(b >= a for a, b in zip(seps, seps[1:])):
            raise ValueError("tier separations must strictly decrease (easy -> hard)")
        if self.samples_per_tier < 1:
            raise ValueError("samples_per_tier must be positive")
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be positive")
        if self.num_classes * self.modes_per_class * 2 > int(np.prod(self.shape)):
            raise ValueError("image dimensionality too small for the cluster count")


def _simplex_directions(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm class centers: regular simplex vertices pushed through a
    random orthonormal embedding into the image space."""
    vertices = np.eye(num_classes) - 1.0 / num_classes
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    basis, _ = np.linalg.qr(rng.normal(size=(dim, num_classes)))
    return vertices @ basis.T  # (num_classes, dim)


def make_synthetic(spec: SyntheticSpec, split: str = "train") -> Dataset:
    """Gaussian clusters on simplex vertices scaled per tier, unit noise.

    Each class owns modes_per_class vertices (round-robin assignment);
    simplex vertices are affinely independent, so the separable limit
    stays linearly classifiable for any mode count. Larger separation
    scale means an easier tier. Deterministic given the spec seed; the
    split tag only derives an independent substream.
    """
    spec.validate()
    split_key = int.from_bytes(split.encode()[:4].ljust(4, b"\0"), "little")
    rng = np.random.default_rng([spec.seed, split_key])
    dim = int(np.prod(spec.shape))
    n_vertices = spec.num_classes * spec.modes_per_class
    centers = _simplex_directions(n_vertices, dim, np.random.default_rng(spec.seed))
    # contiguous vertex blocks per class; any assignment stays linearly
    # separable in full dimension, this one also orders along one axis
    vertex_class = np.arange(n_vertices) // spec.modes_per_class
    n_tiers = len(spec.tier_separations)
    total = n_tiers * spec.samples_per_tier
    images = np.empty((total, dim), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    tiers = np.empty(total, dtype=np.int64)
    row = 0
    for tier, sep in enumerate(spec.tier_separations):
        for _ in range(spec.samples_per_tier):
            v = int(rng.integers(0, n_vertices))
            images[row] = sep * centers[v] + rng.normal(size=dim)
            labels[row] = vertex_class[v]
            tiers[row] = tier
            row += 1
    order = rng.permutation(total)
    return Dataset(
        images[order].reshape((total,) + tuple(spec.shape)),
        labels[order],
        spec.num_classes,
        split,
        tiers=tiers[order],
    )
