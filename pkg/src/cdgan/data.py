"""Dataset ingestion and the builtin synthetic corpus.

The synthetic source draws 10 shape classes at 32x32 with randomized
position and size. The primary class signal is geometric; foreground
color mixes a per-class anchor hue with a wide per-sample draw, so color
is an informative but unreliable secondary cue. Every sample, and its
train/test split membership, is a pure function of (index, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "DatasetDescriptor",
    "Dataset",
    "ingest_dataset",
    "synthetic_sample",
    "SHAPE_CLASSES",
]

SHAPE_CLASSES = (
    "disk", "square", "triangle", "cross", "ring",
    "hbar", "vbar", "diamond", "checker", "dots",
)


@dataclass(frozen=True)
class DatasetDescriptor:
    source: str = "synthetic"      # "synthetic" or a path to an .npz archive
    n_samples: int = 6000
    image_size: int = 32
    channels: int = 3
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.test_fraction < 1.0):
            raise ValueError("test fraction must be in [0, 1)")


@dataclass
class Dataset:
    """In-memory indexed sample source, normalized to [-1, 1]."""

    images: torch.Tensor       # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray         # (N,) int64
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def train_images(self):
        return self.images[torch.as_tensor(self.train_idx)]

    @property
    def test_images(self):
        return self.images[torch.as_tensor(self.test_idx)]

    @property
    def train_labels(self):
        return self.labels[self.train_idx]

    @property
    def test_labels(self):
        return self.labels[self.test_idx]

    def by_class(self, split: str = "test"):
        idx = self.test_idx if split == "test" else self.train_idx
        out = {}
        for cls in np.unique(self.labels[idx]):
            sel = idx[self.labels[idx] == cls]
            out[int(cls)] = self.images[torch.as_tensor(sel)]
        return out


def _split_assignment(index: int, seed: int, test_fraction: float) -> bool:
    """True if the sample belongs to the test split; pure in (index, seed)."""
    u = np.random.default_rng(np.random.SeedSequence((seed, 0x5171, index))).random()
    return u < test_fraction


def _anchor_rgb(label: int) -> np.ndarray:
    """Fully saturated anchor color for a class, hues evenly spaced."""
    h = 6.0 * label / len(SHAPE_CLASSES)
    x = 1.0 - abs(h % 2.0 - 1.0)
    sector = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    return np.array(sector[int(h) % 6], dtype=np.float64)


def synthetic_sample(index: int, seed: int, size: int = 32):
    """Render one labeled sample; pure function of (index, seed).

    Returns (image float32 (3, size, size) in [-1, 1], label int).
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
    label = index % len(SHAPE_CLASSES)  # constructed class balance
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    r = size * rng.uniform(0.22, 0.34)
    dy, dx = yy - cy, xx - cx

    name = SHAPE_CLASSES[label]
    if name == "disk":
        mask = dy ** 2 + dx ** 2 <= r ** 2
    elif name == "square":
        mask = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    elif name == "triangle":
        mask = (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6) & (dy <= r * 0.7)
    elif name == "cross":
        w = r * 0.35
        mask = ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    elif name == "ring":
        d2 = dy ** 2 + dx ** 2
        mask = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif name == "hbar":
        mask = (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r * 1.1)
    elif name == "vbar":
        mask = (np.abs(dx) <= r * 0.35) & (np.abs(dy) <= r * 1.1)
    elif name == "diamond":
        mask = (np.abs(dy) + np.abs(dx)) <= r
    elif name == "checker":
        cell = max(2, int(r / 1.5))
        grid = ((yy // cell + xx // cell) % 2).astype(bool)
        mask = grid & (np.abs(dy) <= r) & (np.abs(dx) <= r)
    else:  # dots
        period = max(3, int(r / 1.2))
        mask = ((yy % period) < period / 2.5) & ((xx % period) < period / 2.5)
        mask &= (np.abs(dy) <= r) & (np.abs(dx) <= r)

    # foreground color: wide per-sample randomness mixed with a per-class
    # anchor hue, so color is an informative but unreliable class cue
    anchor = 0.35 + 0.65 * _anchor_rgb(label)
    fg = 0.5 * rng.uniform(0.35, 1.0, size=3) + 0.5 * anchor
    bg = rng.uniform(0.0, 0.25, size=3)
    img = np.empty((3, size, size), dtype=np.float32)
    for c in range(3):
        img[c] = np.where(mask, fg[c], bg[c])
    return img * 2.0 - 1.0, label


def normalize_uint8(images: np.ndarray) -> np.ndarray:
    """8-bit pixels -> [-1, 1]: 0 maps to -1.0, 255 to +1.0."""
    return images.astype(np.float32) / 127.5 - 1.0


def ingest_dataset(desc: DatasetDescriptor) -> Dataset:
    """Materialize a deterministic indexed sample source from a descriptor."""
    if desc.source == "synthetic":
        images = np.empty((desc.n_samples, desc.channels, desc.image_size,
                           desc.image_size), dtype=np.float32)
        labels = np.empty(desc.n_samples, dtype=np.int64)
        for i in range(desc.n_samples):
            img, lab = synthetic_sample(i, desc.seed, desc.image_size)
            images[i], labels[i] = img, lab
    else:
        with np.load(desc.source) as archive:
            if "images" not in archive:
                raise ValueError(f"archive {desc.source} has no 'images' array")
            raw = archive["images"]
            labels = archive["labels"].astype(np.int64) if "labels" in archive \
                else np.zeros(raw.shape[0], dtype=np.int64)
        if raw.dtype == np.uint8:
            images = normalize_uint8(raw)
        else:
            images = raw.astype(np.float32)
        if images.ndim != 4 or images.shape[1] != desc.channels \
                or images.shape[2] != desc.image_size:
            raise ValueError(
                f"archive shape {images.shape} does not match descriptor "
                f"({desc.channels}, {desc.image_size}, {desc.image_size})")

    n = images.shape[0]
    is_test = np.fromiter(
        (_split_assignment(i, desc.seed, desc.test_fraction) for i in range(n)),
        dtype=bool, count=n)
    return Dataset(
        images=torch.as_tensor(images),
        labels=labels,
        train_idx=np.flatnonzero(~is_test),
        test_idx=np.flatnonzero(is_test),
    )
