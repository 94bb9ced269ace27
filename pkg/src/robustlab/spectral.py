"""Centered 2-D DFT magnitudes and the high-frequency ratio of one-step
conjugates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

# low-frequency windows of the centered spectrum, half-open, by image size
KNOWN_LF_SLICES = {28: (12, 18), 32: (15, 19)}


class SpectralError(ValueError):
    pass


@dataclass
class SpectralConfig:
    lf_rows: tuple[int, int]
    lf_cols: tuple[int, int]
    grayscale: bool = True

    def check(self, h: int, w: int) -> None:
        (r0, r1), (c0, c1) = self.lf_rows, self.lf_cols
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise SpectralError(f"LF slice [{r0}:{r1}, {c0}:{c1}] outside a {h}x{w} spectrum")


def default_config(h: int, w: int) -> SpectralConfig:
    """Known windows for 28x28 and 32x32; otherwise a window of about 6/28 of
    each side, placed like the 28x28 one around the zero-frequency bin."""
    def window(n):
        if n in KNOWN_LF_SLICES:
            return KNOWN_LF_SLICES[n]
        k = max(2, round(n * 6 / 28))
        lo = min(n // 2 - k // 3, n - k)
        return lo, lo + k
    return SpectralConfig(window(h), window(w))


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise SpectralError(f"expected a (C, H, W) image with C in {{1, 3}}, got {image.shape}")
    return image[0].copy() if image.shape[0] == 1 else image.mean(axis=0)


def dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2_centered(image: np.ndarray) -> np.ndarray:
    """|DFT| of an ``(H, W)`` image with the zero frequency moved to
    ``(H // 2, W // 2)``.  Computed as ``F_H @ X @ F_W^T`` (direct sums)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 2:
        raise SpectralError(f"expected an (H, W) image with H, W >= 2, got {image.shape}")
    h, w = image.shape
    spec = dft_matrix(h) @ image @ dft_matrix(w).T
    return np.roll(np.abs(spec), (h // 2, w // 2), axis=(0, 1))


def hf_ratio(image: np.ndarray, config: SpectralConfig | None = None) -> float | None:
    """``(S_total - S_lf) / S_total`` with S the sum of bin magnitudes.

    Accepts ``(H, W)`` or ``(C, H, W)``; colour images are averaged to gray
    unless ``config.grayscale`` is off, in which case per-channel ratios are
    averaged.  Returns None for an all-zero image, where the ratio is
    undefined.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if config is not None and not config.grayscale and image.shape[0] > 1:
            per = [hf_ratio(ch, config) for ch in image]
            per = [r for r in per if r is not None]
            return float(np.mean(per)) if per else None
        image = to_gray(image)
    h, w = image.shape
    config = config or default_config(h, w)
    config.check(h, w)
    mag = dft2_centered(image)
    total = float(mag.sum())
    if total == 0.0:
        return None
    (r0, r1), (c0, c1) = config.lf_rows, config.lf_cols
    low = float(mag[r0:r1, c0:c1].sum())
    return min(1.0, max(0.0, (total - low) / total))


def mean_hf_ratio(images: np.ndarray, config: SpectralConfig | None = None) -> tuple[float | None, int]:
    """Mean ratio over images whose ratio is defined, and how many were."""
    vals = [r for r in (hf_ratio(im, config) for im in images) if r is not None]
    return (float(np.mean(vals)) if vals else None), len(vals)


@dataclass
class RatioPoint:
    checkpoint_id: str
    epoch: int | None
    test_accuracy: float
    mean_ratio: float | None
    sample_count: int

    def row(self) -> list:
        return [self.checkpoint_id, "" if self.epoch is None else self.epoch, self.test_accuracy,
                "" if self.mean_ratio is None else self.mean_ratio, self.sample_count]


RATIO_COLUMNS = ["checkpoint_id", "epoch", "TA", "mean_ratio", "sample_count"]


def one_step_conjugates(model, dataset, epsilon: float) -> np.ndarray:
    """Delta_1 for every sample: a single opposite-FGSM step."""
    from .attacks import build_conjugate_dataset
    return build_conjugate_dataset(model, dataset, epsilon, 1).delta


def hf_ratio_vs_accuracy(checkpoints: Sequence[tuple], dataset, epsilon: float,
                         config: SpectralConfig | None = None) -> list[RatioPoint]:
    """``checkpoints`` holds ``(model, TA)`` or ``(model, TA, id, epoch)`` tuples."""
    out = []
    for k, entry in enumerate(checkpoints):
        model, ta = entry[0], entry[1]
        cid = entry[2] if len(entry) > 2 else f"ckpt{k}"
        epoch = entry[3] if len(entry) > 3 else None
        mean, count = mean_hf_ratio(one_step_conjugates(model, dataset, epsilon), config)
        out.append(RatioPoint(cid, epoch, float(ta), mean, count))
    return out


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float | None:
    """Rank correlation; None when undefined (fewer than two points or a
    constant series)."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if len(xs) < 2 or np.ptp(xs) == 0 or np.ptp(ys) == 0:
        return None
    rho = spearmanr(xs, ys).statistic
    return None if math.isnan(rho) else float(rho)


def write_ratio_csv(path, points: Sequence[RatioPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATIO_COLUMNS)
        for p in points:
            w.writerow(p.row())


def read_ratio_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
