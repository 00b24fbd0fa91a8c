"""Dataset ingestion: CIFAR-10 binary records and a synthetic shapes generator.

Images are stored as float32 arrays in ``[0, 1]`` with shape ``(n, H, W, C)``
(channel-interleaved, row-major), which is the layout every other module
expects.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

CIFAR_SIDE = 32
CIFAR_CLASSES = 10
RECORD_BYTES = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE


class DataError(Exception):
    """Raised for unreadable or malformed dataset files."""


class TruncatedRecordError(DataError):
    pass


class CorruptLabelError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise ValueError("label out of range for class_count")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.class_count)


def load_cifar10(path: str | os.PathLike) -> Dataset:
    """Parse a CIFAR-10 binary batch file.

    Each 3073-byte record is one label byte followed by the R, G and B planes,
    each 32x32 row-major. Record order is preserved.
    """
    if not os.path.isfile(path):
        raise DataError(f"dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise TruncatedRecordError(
            f"{path}: {raw.size} bytes is not a positive multiple of {RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise CorruptLabelError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}")
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return Dataset(np.ascontiguousarray(images), labels, CIFAR_CLASSES)


def to_cifar_bytes(ds: Dataset) -> bytes:
    """Serialize to CIFAR-10 records. Pixels are quantized to bytes."""
    n, h, w, c = ds.images.shape if len(ds) else (0, CIFAR_SIDE, CIFAR_SIDE, 3)
    if (h, w, c) != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValueError(f"CIFAR records need 32x32x3 images, got {h}x{w}x{c}")
    if ds.class_count > 256:
        raise ValueError("labels must fit in one byte")
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = ds.labels
    pix = np.rint(np.clip(ds.images, 0.0, 1.0) * 255.0).astype(np.uint8)
    out[:, 1:] = pix.transpose(0, 3, 1, 2).reshape(n, -1)
    return out.tobytes()


def save_cifar10(ds: Dataset, path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_cifar_bytes(ds))
    os.replace(tmp, path)


# --- synthetic shapes ---------------------------------------------------------

_HUE = 0.08  # one colour family for every class
_SHAPES = ("ring", "plus", "square", "disk", "triangle", "diamond", "hbar", "cross")


def _shape_mask(kind: str, yy, xx, cy, cx, rad, angle):
    # rotate coordinates about the centre
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (ca * dx + sa * dy) / rad
    v = (-sa * dx + ca * dy) / rad
    if kind == "disk":
        return u * u + v * v <= 1.0
    if kind == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == "triangle":
        return (v <= 0.7) & (v >= 2.0 * np.abs(u) - 1.0)
    if kind == "plus":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))
    if kind == "ring":
        d = u * u + v * v
        return (d <= 1.0) & (d >= 0.4)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "hbar":
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)
    if kind == "cross":
        return (np.abs(u - v) <= 0.4) & (np.abs(u + v) <= 2.0) | (np.abs(u + v) <= 0.4) & (np.abs(u - v) <= 2.0)
    raise ValueError(kind)


def generate_synthetic(n: int, classes: int, size: int, seed: int) -> Dataset:
    """Single-object images: one coloured shape per image on a noisy background.

    The class fixes the shape. All classes share one colour family and one
    background level, so neither colour nor brightness identifies a class or
    an individual image; what remains is shape, plus size, position and
    rotation jitter. Labels are assigned round-robin.
    """
    if not 2 <= classes <= len(_SHAPES):
        raise ValueError(f"classes must be in 2..{len(_SHAPES)}")
    if size < 16:
        raise ValueError("size must be at least 16")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    images = np.empty((n, size, size, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for k in range(n):
        cls = int(labels[k])
        img = 0.3 + 0.05 * rng.standard_normal((size, size, 3))
        rad = rng.uniform(0.3, 0.42) * size
        cy, cx = rng.uniform(0.4, 0.6, size=2) * size
        mask = _shape_mask(_SHAPES[cls], yy, xx, cy, cx, rad, rng.uniform(-0.3, 0.3))
        hue = _HUE + rng.uniform(-0.02, 0.02)
        color = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.8))
        img[mask] = color + 0.03 * rng.standard_normal((int(mask.sum()), 3))
        images[k] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, classes)


def channel_stats(ds: Dataset) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std over the whole dataset."""
    flat = ds.images.reshape(-1, ds.images.shape[-1]).astype(np.float64)
    std = np.maximum(flat.std(axis=0), 1e-6)
    return tuple(float(v) for v in flat.mean(axis=0)), tuple(float(v) for v in std)
