"""Datasets: synthetic class-disparity blobs and IDX file loading.

The synthetic generator places one Gaussian blob per class on the vertices
of a scaled coordinate simplex, then pulls each class's center toward the
global centroid by its ``hardness`` factor. A hardness below 1 shrinks that
class's separation from everyone else, which is what makes its robust
accuracy collapse first under attack. All coordinates are squashed into
[0, 1] by a fixed affine map (centers plus a 4-sigma noise allowance) and
clipped, so generation is a pure function of the spec.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor

SIMPLEX_SCALE = 1.0
_NOISE_ALLOWANCE = 4.0

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX file is malformed: wrong magic, truncated, or inconsistent counts."""


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    dim: int = 16
    n_train_per_class: int = 2000
    n_test_per_class: int = 500
    hardness: tuple[float, ...] = (1.0, 1.0, 1.0, 0.35)
    noise_sigma: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < self.n_classes:
            raise ValueError("dim must be >= n_classes so each center gets a coordinate")
        if len(self.hardness) != self.n_classes:
            raise ValueError("hardness must have one entry per class")
        if any(h <= 0 for h in self.hardness):
            raise ValueError("hardness entries must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_train_per_class < 1 or self.n_test_per_class < 1:
            raise ValueError("per-class sample counts must be >= 1")


@dataclass
class Dataset:
    x: np.ndarray  # (N, d) in [0, 1]
    y: np.ndarray  # (N,) int64 in [0, n_classes)
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise tensor.DimensionError("x must be (N, d) with one label per row")
        if self.x.size and (self.x.min() < 0.0 or self.x.max() > 1.0):
            raise ValueError("feature values must lie in [0, 1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.x.shape[0]


def _class_centers(spec: SyntheticSpec) -> np.ndarray:
    centers = np.zeros((spec.n_classes, spec.dim))
    for c in range(spec.n_classes):
        centers[c, c] = SIMPLEX_SCALE
    centroid = centers.mean(axis=0)
    hardness = np.asarray(spec.hardness)[:, None]
    return centroid + hardness * (centers - centroid)


def _sample_split(spec: SyntheticSpec, centers, n_per_class, rng, split) -> Dataset:
    lo = -_NOISE_ALLOWANCE * spec.noise_sigma
    hi = SIMPLEX_SCALE + _NOISE_ALLOWANCE * spec.noise_sigma
    xs, ys = [], []
    for c in range(spec.n_classes):  # fixed class order keeps the draw sequence stable
        raw = centers[c] + spec.noise_sigma * rng.standard_normal((n_per_class, spec.dim))
        xs.append((raw - lo) / (hi - lo))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    x = np.clip(np.concatenate(xs, axis=0), 0.0, 1.0)
    return Dataset(x=x, y=np.concatenate(ys), n_classes=spec.n_classes, split=split)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) pair for the given spec."""
    rng = tensor.new_rng(spec.seed)
    centers = _class_centers(spec)
    train = _sample_split(spec, centers, spec.n_train_per_class, rng, "train")
    test = _sample_split(spec, centers, spec.n_test_per_class, rng, "test")
    return train, test


def _read_exact(f, n: int, path) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated file")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Dataset from an IDX image/label file pair; pixels scaled by 1/255."""
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, images_path))
        if magic != _IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"{images_path}: bad magic {magic:#010x}")
        pixels = np.frombuffer(_read_exact(f, n * rows * cols, images_path), dtype=np.uint8)
        if f.read(1):
            raise IdxFormatError(f"{images_path}: trailing bytes")
    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, labels_path))
        if magic != _IDX_LABELS_MAGIC:
            raise IdxFormatError(f"{labels_path}: bad magic {magic:#010x}")
        labels = np.frombuffer(_read_exact(f, n_labels, labels_path), dtype=np.uint8)
        if f.read(1):
            raise IdxFormatError(f"{labels_path}: trailing bytes")
    if n != n_labels:
        raise IdxFormatError(f"image count {n} != label count {n_labels}")
    x = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    n_classes = int(labels.max()) + 1 if n else 0
    return Dataset(x=x, y=labels.astype(np.int64), n_classes=n_classes, split="test")


def save_idx(ds: Dataset, images_path, labels_path) -> None:
    """Write a dataset as an IDX pair; features are quantized to bytes (x * 255)."""
    n, d = ds.x.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", _IDX_IMAGES_MAGIC, n, 1, d))
        f.write(np.rint(ds.x * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", _IDX_LABELS_MAGIC, n))
        f.write(ds.y.astype(np.uint8).tobytes())


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled (x, y) batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.x[idx], ds.y[idx]
