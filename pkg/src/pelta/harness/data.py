"""Datasets: procedural blobs and CIFAR-10 binary batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    n_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None):
        return Dataset(name or self.name, self.images[idx], self.labels[idx], self.n_classes)

    def split(self, n_first):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))


def _blob(size, cy, cx, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))


def gen_synthetic(n, size=16, n_classes=2, seed=0, channels=1, noise=0.05, amplitude=(0.2, 0.35)):
    """Class-dependent blob layouts plus pixel noise, exactly balanced for n divisible by n_classes.

    Class c places two bright blobs on the c-th diagonal pattern (positions
    jittered per image) over a dim background.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    q1, q3 = size / 4 - 0.5, 3 * size / 4 - 0.5
    corners = [((q1, q1), (q3, q3)), ((q1, q3), (q3, q1)), ((q1, size / 2), (q3, size / 2)), ((size / 2, q1), (size / 2, q3))]
    images = np.empty((n, channels, size, size))
    for k, c in enumerate(labels):
        pattern = corners[c % len(corners)]
        img = np.full((size, size), 0.1)
        for cy, cx in pattern:
            jy, jx = rng.uniform(-size / 16, size / 16, size=2)
            amp = rng.uniform(*amplitude)
            img += amp * _blob(size, cy + jy, cx + jx, size / 10)
        img = img[None] + noise * rng.standard_normal((channels, size, size))
        images[k] = np.clip(img, 0.0, 1.0)
    return Dataset(f"synthetic{size}", images, labels, n_classes)


def load_cifar10(path, name=None):
    """Parse one CIFAR-10 binary batch: 3073-byte records of label + R, G, B planes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_cifar10(raw, name or str(path))


def parse_cifar10(raw: bytes, name="cifar10"):
    if len(raw) % CIFAR_RECORD:
        raise ValueError(f"truncated CIFAR-10 file: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise ValueError(f"record {bad} has label {labels[bad]} >= 10")
    images = rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return Dataset(name, images, labels, 10)


def dump_cifar10(ds: Dataset) -> bytes:
    """Inverse of ``parse_cifar10`` for images on the 1/255 grid."""
    if ds.images.shape[1:] != CIFAR_SHAPE:
        raise ValueError(f"CIFAR-10 images are {CIFAR_SHAPE}, got {ds.images.shape[1:]}")
    pix = np.rint(ds.images * 255.0).astype(np.uint8).reshape(len(ds), -1)
    return np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1).tobytes()
