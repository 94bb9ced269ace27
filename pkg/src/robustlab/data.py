"""Datasets: MNIST IDX and CIFAR-10 binary readers/writers, synthetic
low-dimensional sets, and seeded subsetting."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor.rng import draw_normal, rng_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")


@dataclass
class Dataset:
    inputs: np.ndarray          # (N, *feature_shape), float64
    labels: np.ndarray          # (N,), int64
    class_count: int
    value_range: tuple[float, float] = (0.0, 1.0)
    # per-axis (lo, hi) box for low-dimensional sets; None for images
    bounds: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count,
                       self.value_range, self.bounds, self.name)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(raw) < 4:
        raise DataFormatError(f"{what}: truncated header", len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{what}: wrong magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: truncated header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < need:
        raise DataFormatError(f"{what}: truncated payload, expected {need} bytes", len(raw))
    if len(raw) - header > need:
        raise DataFormatError(f"{what}: trailing bytes after payload", header + need)
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header, count=need)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (raw or gzipped); pixels scaled to [0, 1]."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    n, rows, cols = dims
    if n != n_labels:
        raise DataFormatError(f"image count {n} != label count {n_labels}", 4)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataFormatError(f"label {labels[bad]} out of range", 8 + bad)
    x = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), 10, (0.0, 1.0), name="mnist")


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the /255 scaling; exact for arrays produced by the loaders."""
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``(N, 28, 28)`` or ``(N, 1, 28, 28)`` images (floats in [0, 1] or uint8)."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = to_bytes(images)
    images = images.reshape(len(images), images.shape[-2], images.shape[-1])
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()
    for path, payload in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        path.write_bytes(gzip.compress(payload, mtime=0) if path.suffix == ".gz" else payload)


def load_cifar10_bin(path) -> Dataset:
    """Read CIFAR-10 binary records: 1 label byte + 3072 channel-planar pixels."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"length {len(raw)} is not a multiple of {CIFAR_RECORD}",
                              len(raw) - len(raw) % CIFAR_RECORD)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataFormatError(f"label {labels[bad]} out of range", bad * CIFAR_RECORD)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(x, labels, 10, (0.0, 1.0), name="cifar10")


def write_cifar10_bin(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = to_bytes(images)
    images = images.reshape(len(images), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


# synthetic ----------------------------------------------------------------

@dataclass
class SyntheticSpec:
    kind: str = "gaussian-blobs"     # or "two-moons"
    dimension: int = 2
    per_class: int = 100
    noise: float = 0.2
    seed: int = 0
    classes: int = 2
    separation: float = 2.0          # blob center radius

    def __post_init__(self):
        if self.kind not in ("gaussian-blobs", "two-moons"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.dimension not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        if self.per_class <= 0 or self.classes <= 0:
            raise ValueError("counts must be positive")
        if self.kind == "two-moons" and (self.dimension < 2 or self.classes != 2):
            raise ValueError("two-moons needs dimension >= 2 and exactly 2 classes")


def blob_centers(spec: SyntheticSpec) -> np.ndarray:
    k, d = spec.classes, spec.dimension
    centers = np.zeros((k, d))
    if d == 1:
        centers[:, 0] = (np.arange(k) - (k - 1) / 2) * spec.separation
    else:
        ang = 2 * np.pi * np.arange(k) / k
        centers[:, 0] = spec.separation * np.cos(ang)
        centers[:, 1] = spec.separation * np.sin(ang)
    return centers


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = rng_stream(spec.seed, 0)
    n, d = spec.per_class, spec.dimension
    if spec.kind == "gaussian-blobs":
        base = np.repeat(blob_centers(spec), n, axis=0)
    else:
        t = np.linspace(0, np.pi, n)
        outer = np.stack([np.cos(t), np.sin(t)], axis=1)
        inner = np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        base = np.zeros((2 * n, d))
        base[:, :2] = np.concatenate([outer, inner])
    x = base + spec.noise * draw_normal(rng, base.shape)
    labels = np.repeat(np.arange(spec.classes), n)
    pad = 3.0 * spec.noise
    bounds = np.stack([x.min(axis=0) - pad, x.max(axis=0) + pad], axis=1)
    return Dataset(x, labels, spec.classes, (float(bounds[:, 0].min()), float(bounds[:, 1].max())),
                   bounds=bounds, name=spec.kind)


# subsetting ---------------------------------------------------------------

def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """``n`` samples without replacement, deterministic in ``seed``."""
    if n > len(dataset):
        raise ValueError(f"subset of {n} requested from {len(dataset)} samples")
    perm = rng_stream(seed, 1).permutation(len(dataset))
    return dataset.take(perm[:n])


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    perm = rng_stream(seed, 2).permutation(len(dataset))
    cut = int(round(fraction * len(dataset)))
    return dataset.take(perm[:cut]), dataset.take(perm[cut:])


def train_test_subsets(dataset: Dataset, n_train: int, n_test: int, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/test subsets drawn from one shuffled order."""
    if n_train + n_test > len(dataset):
        raise ValueError(f"{n_train}+{n_test} samples requested from {len(dataset)}")
    perm = rng_stream(seed, 3).permutation(len(dataset))
    return dataset.take(perm[:n_train]), dataset.take(perm[n_train:n_train + n_test])
