"""Dataset ingestion: IDX binary files plus a synthetic fallback generator.

The synthetic generator draws ten visually distinct procedural glyph
classes on a 28x28 canvas so the pipeline has no download dependency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 1), float64 in [0, 1]
    labels: np.ndarray  # (N,), int64 in [0, NUM_CLASSES)
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 1:
            raise ValueError(f"images must be (N,H,W,1), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image components must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self):
        return len(self.labels)


def read_idx_images(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: bad magic (file too short)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"{path}: bad magic {magic:#010x}, expected image file")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw)} bytes, need {expected})")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return (pixels.reshape(count, rows, cols, 1) / 255.0).astype(np.float64)


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: bad magic (file too short)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"{path}: bad magic {magic:#010x}, expected label file")
    if len(raw) != 8 + count:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw)} bytes, need {8 + count})")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def read_idx(images_path, labels_path, split="train") -> Dataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image/label count mismatch: {len(images)} images vs {len(labels)} labels")
    return Dataset(images=images, labels=labels, split=split)


@dataclass(frozen=True)
class SyntheticSpec:
    per_class: int
    classes: int = NUM_CLASSES
    noise: float = 0.15
    seed: int = 0
    side: int = 28


def _draw_glyph(canvas: np.ndarray, cls: int, dy: int, dx: int):
    s = canvas.shape[0]
    c = s // 2
    ii, jj = np.mgrid[0:s, 0:s]
    ii = ii - dy
    jj = jj - dx
    if cls == 0:  # two horizontal bars
        bars = (np.abs(ii - (c - 5)) <= 1) | (np.abs(ii - (c + 5)) <= 1)
        canvas[bars & (np.abs(jj - c) <= 9)] = 1.0
    elif cls == 1:  # two vertical bars
        bars = (np.abs(jj - (c - 5)) <= 1) | (np.abs(jj - (c + 5)) <= 1)
        canvas[bars & (np.abs(ii - c) <= 9)] = 1.0
    elif cls == 2:  # thick plus
        arm = (np.abs(ii - c) <= 2) & (np.abs(jj - c) <= 9)
        arm |= (np.abs(jj - c) <= 2) & (np.abs(ii - c) <= 9)
        canvas[arm] = 1.0
    elif cls == 3:  # ring
        r = np.hypot(ii - c, jj - c)
        canvas[(r >= 5) & (r <= 9)] = 1.0
    elif cls == 4:  # filled square
        canvas[(np.abs(ii - c) <= 5) & (np.abs(jj - c) <= 5)] = 1.0
    elif cls == 5:  # main diagonal band
        canvas[(np.abs(ii - jj) <= 2) & (np.abs(ii - c) <= 7)] = 1.0
    elif cls == 6:  # X
        d1 = np.abs(ii - jj) <= 1
        d2 = np.abs(ii + jj - 2 * c) <= 1
        canvas[(d1 | d2) & (np.abs(ii - c) <= 8)] = 1.0
    elif cls == 7:  # filled triangle
        rows = ii - (c - 7)
        canvas[(rows >= 0) & (rows <= 13) & (np.abs(jj - c) <= rows // 2)] = 1.0
    elif cls == 8:  # coarse checkerboard
        tile = (((ii - c + 9) // 6 + (jj - c + 9) // 6) % 2 == 0)
        canvas[tile & (np.abs(ii - c) <= 8) & (np.abs(jj - c) <= 8)] = 1.0
    elif cls == 9:  # four corner blobs
        for oy in (-6, 6):
            for ox in (-6, 6):
                blob = (np.abs(ii - c - oy) <= 2) & (np.abs(jj - c - ox) <= 2)
                canvas[blob] = 1.0
    else:
        raise ValueError(f"no glyph family for class {cls}")


def generate_synthetic(spec: SyntheticSpec, split="train") -> Dataset:
    if spec.classes > NUM_CLASSES:
        raise ValueError(f"at most {NUM_CLASSES} glyph families available")
    rng = np.random.default_rng(spec.seed)
    n = spec.classes * spec.per_class
    images = np.zeros((n, spec.side, spec.side, 1))
    labels = np.zeros(n, dtype=np.int64)
    i = 0
    for cls in range(spec.classes):
        for _ in range(spec.per_class):
            canvas = np.zeros((spec.side, spec.side))
            dy = int(rng.integers(-2, 3))
            dx = int(rng.integers(-2, 3))
            _draw_glyph(canvas, cls, dy, dx)
            canvas *= float(rng.uniform(0.55, 1.0))
            if spec.noise > 0:
                canvas = canvas + rng.normal(0.0, spec.noise, canvas.shape)
            images[i, :, :, 0] = np.clip(canvas, 0.0, 1.0)
            labels[i] = cls
            i += 1
    return Dataset(images=images, labels=labels, split=split)
