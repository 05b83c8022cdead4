"""Datasets: MNIST IDX files and small synthetic problems."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "all"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.max() >= self.class_count:
            raise DatasetError("label exceeds class count")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def subset(self, start: int, stop: int, split: str | None = None) -> "Dataset":
        return Dataset(
            self.images[start:stop].copy(), self.labels[start:stop].copy(), self.class_count, split or self.split
        )


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_mnist_idx(images_path, labels_path, limit: int | None = None, split: str = "all") -> Dataset:
    """Read an IDX image/label pair (raw or gzip). Pixels are scaled to [0, 1]."""
    img = _read(images_path)
    lab = _read(labels_path)
    if len(img) < 16:
        raise DatasetError(f"image file truncated in header ({len(img)} bytes)")
    magic, n, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"bad image file magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(lab) < 8:
        raise DatasetError(f"label file truncated in header ({len(lab)} bytes)")
    lmagic, ln = struct.unpack_from(">II", lab, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise DatasetError(f"bad label file magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if ln != n:
        raise DatasetError(f"image count {n} != label count {ln}")
    if len(img) < 16 + n * rows * cols:
        raise DatasetError(f"image data truncated: {len(img) - 16} bytes for {n}x{rows}x{cols}")
    if len(lab) < 8 + n:
        raise DatasetError(f"label data truncated: {len(lab) - 8} bytes for {n} labels")
    k = n if limit is None else min(n, limit)
    pixels = np.frombuffer(img, dtype=np.uint8, count=k * rows * cols, offset=16)
    images = (pixels.reshape(k, 1, rows, cols) / 255.0).astype(np.float64)
    labels = np.frombuffer(lab, dtype=np.uint8, count=k, offset=8).astype(np.int64)
    return Dataset(images, labels, 10, split)


def write_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path, compress: bool = False):
    """Write uint8 images (n, rows, cols) and labels as an IDX pair."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images_u8.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    if compress:
        img, lab = gzip.compress(img, mtime=0), gzip.compress(lab, mtime=0)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


def find_mnist(directory) -> tuple[list[Path], list[Path]]:
    """Locate (train, test) IDX pairs in a directory, raw or gzipped."""
    d = Path(directory)

    def pick(*stems):
        for stem in stems:
            for suffix in ("", ".gz"):
                p = d / f"{stem}{suffix}"
                if p.exists():
                    return p
        raise DatasetError(f"no {stems[0]} file in {d}")

    train = [pick("train-images-idx3-ubyte", "train10k-images-idx3-ubyte"),
             pick("train-labels-idx1-ubyte", "train10k-labels-idx1-ubyte")]
    test = [pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte")]
    return train, test


def load_mnist_split(directory, n_train: int = 10000, n_test: int = 2000) -> tuple[Dataset, Dataset]:
    train, test = find_mnist(directory)
    return (
        load_mnist_idx(*train, limit=n_train, split="train"),
        load_mnist_idx(*test, limit=n_test, split="test"),
    )


def gen_synthetic(kind: str, n: int, classes: int, seed: int, features: int = 2) -> Dataset:
    """Deterministic toy data with features in [0, 1].

    ``blobs`` draws isotropic Gaussian clusters around well-separated
    centers; ``spiral`` interleaves noisy arms of an Archimedean spiral.
    """
    if classes < 2:
        raise DatasetError("need at least 2 classes")
    if n < classes:
        raise DatasetError(f"n={n} must be >= classes={classes}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    if kind == "blobs":
        angles = 2 * np.pi * np.arange(classes) / classes
        centers = np.zeros((classes, features))
        centers[:, 0], centers[:, 1 % features] = np.cos(angles), np.sin(angles)
        x = centers[labels] * 3.0 + rng.normal(scale=0.5, size=(n, features))
    elif kind == "spiral":
        if features != 2:
            raise DatasetError("spiral data is 2-D")
        t = rng.uniform(0.25, 1.0, size=n)
        theta = 3 * np.pi * t + 2 * np.pi * labels / classes
        x = np.stack([t * np.cos(theta), t * np.sin(theta)], axis=1)
        x += rng.normal(scale=0.02, size=x.shape)
    else:
        raise DatasetError(f"unknown synthetic kind {kind!r}")
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(x.astype(np.float64), labels.astype(np.int64), classes, "all")
