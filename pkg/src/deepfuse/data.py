"""Dataset ingestion, preprocessing, augmentation, and synthetic data.

The CIFAR binary codec is byte-faithful: one record is a label byte
(CIFAR-10) or a coarse+fine label pair (CIFAR-100) followed by 3072
pixel bytes laid out as 1024 R, 1024 G, 1024 B, each row-major.
Images are held as float32 in [0, 255] until normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

_C10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
_C10_TEST_FILES = ["test_batch.bin"]
_C100_TRAIN_FILES = ["train.bin"]
_C100_TEST_FILES = ["test.bin"]

GCN_EPS = 1e-8


@dataclass
class Dataset:
    images: np.ndarray           # (N, 3, 32, 32) float32, [0, 255] pre-GCN
    labels: np.ndarray           # (N,) int64
    split: str = "train"
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise ValueError(f"images must be (N, 3, 32, 32), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        """Deterministic prefix subset."""
        coarse = None if self.coarse_labels is None else self.coarse_labels[:n]
        return Dataset(self.images[:n], self.labels[:n], self.split, coarse)


@dataclass
class AugmentConfig:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5
    gcn: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be nonnegative")
        if self.crop > 32 + 2 * self.pad:
            raise ValueError(f"crop {self.crop} exceeds padded extent {32 + 2 * self.pad}")


class CifarFormatError(ValueError):
    """Corrupt or truncated CIFAR binary data."""


def _record_size(variant: str) -> tuple[int, int]:
    if variant == "c10":
        return 3073, 1
    if variant == "c100":
        return 3074, 2
    raise ValueError(f"unknown CIFAR variant {variant!r}")


def decode_cifar_bytes(raw: bytes, variant: str) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Decode raw CIFAR binary bytes into (images, labels, coarse_labels)."""
    rec, label_bytes = _record_size(variant)
    if len(raw) % rec != 0:
        good = (len(raw) // rec) * rec
        raise CifarFormatError(
            f"truncated record at byte offset {good}: "
            f"{len(raw) - good} trailing bytes (record size {rec})")
    n = len(raw) // rec
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    pixels = arr[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float32)
    if variant == "c10":
        return pixels, arr[:, 0].astype(np.int64), None
    return pixels, arr[:, 1].astype(np.int64), arr[:, 0].astype(np.int64)


def encode_cifar_bytes(dataset: Dataset, variant: str) -> bytes:
    """Inverse of decode_cifar_bytes; exact for integer-valued pixels."""
    rec, label_bytes = _record_size(variant)
    n = len(dataset)
    pixels = dataset.images
    if not np.array_equal(pixels, np.round(pixels)) or pixels.min() < 0 or pixels.max() > 255:
        raise CifarFormatError("images must hold integer values in [0, 255] to encode")
    out = np.empty((n, rec), dtype=np.uint8)
    if variant == "c10":
        out[:, 0] = dataset.labels
    else:
        if dataset.coarse_labels is None:
            raise CifarFormatError("c100 encoding needs coarse labels")
        out[:, 0] = dataset.coarse_labels
        out[:, 1] = dataset.labels
    out[:, label_bytes:] = pixels.astype(np.uint8).reshape(n, -1)
    return out.tobytes()


def load_cifar(path: str, variant: str = "c10", split: str = "train") -> Dataset:
    """Load the standard CIFAR-10/100 binary files.

    `path` is either the directory holding the distribution's .bin files
    or a single .bin file (loaded as the requested split). CIFAR-100's
    fine label is the training target; the coarse label rides along.
    """
    if os.path.isfile(path):
        files = [path]
    else:
        names = {
            ("c10", "train"): _C10_TRAIN_FILES,
            ("c10", "test"): _C10_TEST_FILES,
            ("c100", "train"): _C100_TRAIN_FILES,
            ("c100", "test"): _C100_TEST_FILES,
        }.get((variant, split))
        if names is None:
            raise ValueError(f"unknown variant/split {variant!r}/{split!r}")
        files = [os.path.join(path, name) for name in names]
        missing = [f for f in files if not os.path.exists(f)]
        if missing:
            raise FileNotFoundError(f"missing CIFAR files: {missing}")
    images, labels, coarse = [], [], []
    for f in files:
        with open(f, "rb") as fh:
            raw = fh.read()
        try:
            px, lb, co = decode_cifar_bytes(raw, variant)
        except CifarFormatError as e:
            raise CifarFormatError(f"{f}: {e}") from e
        images.append(px)
        labels.append(lb)
        if co is not None:
            coarse.append(co)
    return Dataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        split=split,
        coarse_labels=np.concatenate(coarse) if coarse else None,
    )


def global_contrast_normalize(images: np.ndarray, eps: float = GCN_EPS) -> np.ndarray:
    """Per image: subtract the image mean, divide by max(image std, eps).

    Statistics run over all 3*32*32 values of each image (not per
    channel), accumulated in float64.
    """
    n = images.shape[0]
    flat = images.reshape(n, -1)
    mean = flat.mean(axis=1, dtype=np.float64)
    std = flat.std(axis=1, dtype=np.float64)
    denom = np.maximum(std, eps)
    out = (flat - mean[:, None]) / denom[:, None]
    return out.astype(np.float32).reshape(images.shape)


def pad_crop_flip(images: np.ndarray, offsets: np.ndarray, flips: np.ndarray,
                  pad: int = 4, crop: int = 32) -> np.ndarray:
    """Deterministic core of the augmentation: zero-pad, crop at the given
    per-image offsets, mirror where flips is set."""
    n, c, h, w = images.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad : pad + h, pad : pad + w] = images
    out = np.empty((n, c, crop, crop), dtype=images.dtype)
    for i in range(n):
        oy, ox = offsets[i]
        window = padded[i, :, oy : oy + crop, ox : ox + crop]
        out[i] = window[:, :, ::-1] if flips[i] else window
    return out


def augment(images: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Random crop out of the zero-padded image plus random horizontal flip.

    Deterministic for a given generator state; without one, a fresh
    generator is seeded from cfg.seed.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n = images.shape[0]
    span = images.shape[2] + 2 * cfg.pad - cfg.crop + 1
    offsets = rng.integers(0, span, size=(n, 2))
    flips = rng.random(n) < cfg.hflip_prob
    return pad_crop_flip(images, offsets, flips, cfg.pad, cfg.crop)


def synthetic_dataset(seed: int = 0, n: int = 1000, classes: int = 10,
                      difficulty: float = 0.0) -> Dataset:
    """Class-conditional Gaussian-blob images for fast desk-scale tests.

    Each class owns a blob position and channel mix; samples add noise
    scaled by `difficulty`. At difficulty 0 the classes are exact
    templates, trivially linearly separable. Labels are balanced.
    """
    if n < classes:
        raise ValueError(f"need at least one sample per class ({n} < {classes})")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32]
    templates = np.empty((classes, 3, 32, 32), dtype=np.float32)
    for c in range(classes):
        angle = 2 * np.pi * c / classes
        cy, cx = 16 + 9 * np.sin(angle), 16 + 9 * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 4.0 ** 2))
        mix = rng.random(3) + 0.2
        mix = mix / mix.max()
        templates[c] = 30.0 + 200.0 * mix[:, None, None] * bump

    per_class = np.full(classes, n // classes)
    per_class[: n % classes] += 1
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(n)
    labels = labels[order]
    images = templates[labels]
    if difficulty > 0:
        noise = rng.standard_normal(images.shape).astype(np.float32)
        images = images + difficulty * 60.0 * noise
    images = np.clip(images, 0.0, 255.0)
    return Dataset(images=np.ascontiguousarray(images), labels=labels.astype(np.int64))
