"""Datasets: IDX (MNIST-style) files, CIFAR-10 binary batches and a synthetic set."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    classes: int = 10
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("images must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, count: int, split: str | None = None) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.classes, split or self.split)


def _read_idx(path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetFormatError(f"{path}: truncated header, {len(raw)} bytes at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{path}: truncated header at byte offset {len(raw)}, expected {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: expected {expected} bytes, got {len(raw)} (data ends at byte offset {len(raw)})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, classes: int = 10, split: str = "train") -> Dataset:
    """Read an IDX image file (and optionally its label file); pixels scaled by 1/255."""
    imgs = _read_idx(images_path, IDX_IMAGES)
    if labels_path is None:
        labels = np.zeros(imgs.shape[0], dtype=np.int64)
    else:
        labels = _read_idx(labels_path, IDX_LABELS).astype(np.int64)
        if labels.shape[0] != imgs.shape[0]:
            raise DatasetFormatError(f"{labels_path}: {labels.shape[0]} labels for {imgs.shape[0]} images")
    return Dataset(imgs[:, None].astype(np.float32) / 255.0, labels, classes, split)


def load_cifar_bin(path, split: str = "train") -> Dataset:
    """CIFAR-10 binary batch: per record one label byte then 3x32x32 channel-planar pixels."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DatasetFormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"partial record starts at byte offset {len(raw) - len(raw) % CIFAR_RECORD}")
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, recs[:, 0].astype(np.int64), 10, split)


def synth_dataset(classes: int = 10, n: int = 1000, seed: int = 0, size: int = 12, channels: int = 1,
                  noise: float = 0.5, split: str = "train") -> Dataset:
    """Class templates plus uniform noise.

    Each class has a fixed random template (drawn from the seed alone, so train
    and test splits built with different ``split`` names share templates).
    Images are ``(1 - noise) * template + noise * U(0, 1)``.
    """
    if n % classes:
        raise ValueError(f"n={n} must be a multiple of classes={classes}")
    if not 0 <= noise <= 1:
        raise ValueError("noise must lie in [0, 1]")
    templates = np.random.default_rng([seed, 0]).uniform(0, 1, (classes, channels, size, size))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(classes), n // classes)
    rng.shuffle(labels)
    images = (1 - noise) * templates[labels] + noise * rng.uniform(0, 1, (n, channels, size, size))
    return Dataset(images.astype(np.float32), labels, classes, split)
