"""Datasets: the CIFAR-10 binary format and synthetic stand-ins for when it is absent."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError

RECORD_BYTES = 3073
RECORDS_PER_BATCH = 10000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
DATA_DIR_ENV = "DEEP_PURSUIT_DATA_DIR"


@dataclass
class DatasetHandle:
    images: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic"
    split: str = "train"
    n_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def balance_report(self) -> str:
        counts = self.class_counts
        return (f"{self.provenance}/{self.split}: N={len(self)}, per-class min {counts.min()} "
                f"max {counts.max()}")

    def subset(self, n: int | None) -> "DatasetHandle":
        if n is None or n >= len(self):
            return self
        return DatasetHandle(self.images[:n], self.labels[:n], self.provenance, self.split, self.n_classes)

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray]:
        return self.images, self.labels


# ----------------------------------------------------------------------------
# CIFAR-10 binary batches
# ----------------------------------------------------------------------------


def parse_cifar_batch(blob: bytes, records: int | None = RECORDS_PER_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """Split raw batch bytes into ``uint8`` labels ``(N,)`` and pixels ``(N, 3, 32, 32)``."""
    if records is not None and len(blob) != records * RECORD_BYTES:
        raise DataError(f"batch has {len(blob)} bytes; expected {records} x {RECORD_BYTES}")
    if len(blob) == 0 or len(blob) % RECORD_BYTES:
        raise DataError(f"batch size {len(blob)} is not a positive multiple of {RECORD_BYTES}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].copy()
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"record {bad[0]} has label byte {labels[bad[0]]} > 9")
    return labels, raw[:, 1:].reshape(-1, 3, 32, 32).copy()


def serialize_cifar_batch(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    """Inverse of :func:`parse_cifar_batch`."""
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    if pixels.shape[1] != RECORD_BYTES - 1:
        raise DataError(f"records need {RECORD_BYTES - 1} pixel bytes, got {pixels.shape[1]}")
    return np.concatenate([labels, pixels], axis=1).tobytes()


def to_pixel_bytes(images: np.ndarray) -> np.ndarray:
    """Recover the original bytes of images that were decoded as ``byte / 255``."""
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def resolve_data_dir(directory=None) -> Path:
    if directory is None:
        directory = os.environ.get(DATA_DIR_ENV)
        if not directory:
            raise DataError(f"no dataset directory given and {DATA_DIR_ENV} is unset")
    path = Path(directory)
    nested = path / "cifar-10-batches-bin"
    return nested if nested.is_dir() else path


def load_cifar10(directory=None, split: str = "train", records: int | None = RECORDS_PER_BATCH) -> DatasetHandle:
    """Read the standard binary batches; pixels become ``byte / 255``."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    root = resolve_data_dir(directory)
    names = TRAIN_FILES if split == "train" else TEST_FILES
    labels, pixels = [], []
    for name in names:
        path = root / name
        if not path.is_file():
            raise DataError(f"missing CIFAR-10 batch file {path}")
        lab, pix = parse_cifar_batch(path.read_bytes(), records)
        labels.append(lab)
        pixels.append(pix)
    images = np.concatenate(pixels).astype(np.float64) / 255.0
    return DatasetHandle(images, np.concatenate(labels), "cifar10", split)


def downsample(dataset: DatasetHandle, factor: int) -> DatasetHandle:
    """Average-pool images by ``factor`` in both spatial directions."""
    if factor < 1:
        raise DataError("downsampling factor must be >= 1")
    if factor == 1:
        return dataset
    n, c, h, w = dataset.images.shape
    if h % factor or w % factor:
        raise DataError(f"image size {h}x{w} is not divisible by {factor}")
    pooled = dataset.images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    tag = dataset.provenance if dataset.provenance.endswith("-downsampled") else dataset.provenance + "-downsampled"
    return DatasetHandle(pooled, dataset.labels, tag, dataset.split, dataset.n_classes)


# ----------------------------------------------------------------------------
# synthetic clusters
# ----------------------------------------------------------------------------


def synth_dataset(classes: int, dim: int, n: int, seed: int = 0, margin: float = 3.0, noise: float = 1.0,
                  shape: tuple | None = None, split: str = "train") -> DatasetHandle:
    """Gaussian clusters around random class centres at distance ``margin`` from the origin.

    Centres depend on ``seed`` only, so the train and test splits share them;
    samples are drawn from an independent stream per split. Values are mapped
    affinely into [0, 1] (clipping beyond five noise deviations).
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if n < 1:
        raise DataError("synthetic dataset must have at least one sample")
    shape = (dim,) if shape is None else tuple(shape)
    if int(np.prod(shape)) != dim:
        raise ValueError(f"shape {shape} does not hold {dim} values")
    centres = np.random.default_rng(seed).normal(size=(classes, dim))
    centres *= margin / np.linalg.norm(centres, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = rng.permutation(np.arange(n) % classes)
    x = centres[labels] + noise * rng.normal(size=(n, dim))
    half_range = margin + 5.0 * noise
    images = np.clip(0.5 + x / (2.0 * half_range), 0.0, 1.0)
    return DatasetHandle(images.reshape((n,) + shape), labels, "synthetic", split, classes)


def synth_textures(classes: int, n: int, seed: int = 0, shape: tuple = (3, 8, 8), contrast: float = 0.25,
                   noise: float = 0.5, split: str = "train") -> DatasetHandle:
    """Colour-and-texture images standing in for small natural images.

    Each class owns a mean colour and an oriented plane wave with its own
    frequency and colour; every sample draws a random phase (so the pattern
    shifts), a brightness jitter and white noise of relative size ``noise``.
    Pixels are ``0.5 + contrast * signal`` clipped to [0, 1].
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if n < 1:
        raise DataError("synthetic dataset must have at least one sample")
    c, h, w = shape
    g = np.random.default_rng(seed)
    colour = g.normal(size=(classes, c))
    wave_colour = g.normal(size=(classes, c))
    theta = g.uniform(0, np.pi, size=classes)
    freq = g.uniform(0.1, 0.4, size=classes)
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    labels = rng.permutation(np.arange(n) % classes)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    proj = np.cos(theta)[labels, None, None] * ii + np.sin(theta)[labels, None, None] * jj
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    wave = np.cos(2 * np.pi * freq[labels, None, None] * proj + phase)
    signal = (colour[labels, :, None, None] * 0.5 + wave_colour[labels, :, None, None] * wave[:, None])
    signal += rng.normal(scale=0.3, size=(n, 1, 1, 1)) + noise * rng.normal(size=(n, c, h, w))
    images = np.clip(0.5 + contrast * signal, 0.0, 1.0)
    return DatasetHandle(images, labels, "synthetic-textures", split, classes)
