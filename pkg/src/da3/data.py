"""Synthetic two-domain image task and DA3T dataset files.

Domain A draws each class as a few coloured Gaussian blobs at class-specific
places, jittered and noised per sample.  Domain B renders the same classes
with the colour channels permuted, a high-frequency texture multiplied in,
and class-independent clutter blobs scattered over the image, so a
source-trained backbone needs both channel remixing and spatial selection
to transfer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .io import load_tensor, save_tensor
from .train import Dataset

SPLITS = ("x_train", "y_train", "x_test", "y_test")


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 4
    image_size: int = 16
    blobs: int = 2
    sigma: float = 1.6
    jitter: int = 2
    noise: float = 0.3
    clutter: int = 2
    texture: float = 0.6
    seed: int = 1234  # fixes the class templates shared by both domains

    def __post_init__(self):
        if self.num_classes < 2 or self.image_size < 4 or self.blobs < 1:
            raise ConfigError("task needs >= 2 classes, image_size >= 4 and >= 1 blob")


def _templates(spec: TaskSpec):
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    lo, hi = spec.jitter + 1, s - spec.jitter - 1
    centers = rng.uniform(lo, hi, (spec.num_classes, spec.blobs, 2))
    colors = rng.normal(0, 1, (spec.num_classes, spec.blobs, 3))
    colors /= np.linalg.norm(colors, axis=-1, keepdims=True)
    return centers, colors


def _blob(s, cy, cx, sigma):
    yy, xx = np.mgrid[0:s, 0:s]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))


def make_domain(domain: str, n: int, spec: TaskSpec = TaskSpec(), seed: int = 0,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """``n`` images ``[n,3,s,s]`` with balanced labels for domain ``"A"`` or ``"B"``."""
    if domain not in ("A", "B"):
        raise ConfigError(f"domain must be 'A' or 'B', got {domain!r}")
    if n < 1:
        raise ConfigError("need at least one sample")
    s = spec.image_size
    centers, colors = _templates(spec)
    rng = np.random.default_rng([seed, ord(domain)])
    labels = rng.permutation(np.arange(n) % spec.num_classes)
    x = np.zeros((n, 3, s, s))
    perm = np.array([2, 0, 1])
    yy, xx = np.mgrid[0:s, 0:s]
    stripes = np.where((yy + xx) % 2 == 0, 1.0, 1.0 - 2 * spec.texture)
    for i, k in enumerate(labels):
        shift = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
        amp = rng.uniform(0.8, 1.2)
        img = np.zeros((3, s, s))
        for b in range(spec.blobs):
            cy, cx = centers[k, b] + shift
            img += amp * colors[k, b][:, None, None] * _blob(s, cy, cx, spec.sigma)
        if domain == "B":
            img = img[perm] * stripes
            for _ in range(spec.clutter):
                cy, cx = rng.uniform(0, s, 2)
                col = rng.normal(0, 1, 3)
                img += 1.5 * col[:, None, None] / np.linalg.norm(col) * _blob(s, cy, cx,
                                                                              spec.sigma)
        x[i] = img + spec.noise * rng.normal(size=(3, s, s))
    return x.astype(dtype), labels.astype(np.int64)


def two_domain_task(n_train: int = 512, n_test: int = 1024, spec: TaskSpec = TaskSpec(),
                    seed: int = 0, dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Source (A) and target (B) datasets; test splits use disjoint rng streams."""
    out = []
    for domain in ("A", "B"):
        xtr, ytr = make_domain(domain, n_train, spec, seed=2 * seed, dtype=dtype)
        xte, yte = make_domain(domain, n_test, spec, seed=2 * seed + 1, dtype=dtype)
        out.append(Dataset(xtr, ytr, xte, yte))
    return out[0], out[1]


def linearly_separable(n: int = 64, num_classes: int = 2, image_size: int = 8, seed: int = 0,
                       dtype=np.float32) -> Dataset:
    """Classes differ by a constant per-channel offset: separable by a linear head."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % num_classes
    x = rng.normal(0, 0.1, (n, 3, image_size, image_size))
    x[:, 0] += np.where(y == 0, -1.0, 1.0)[:, None, None]
    return Dataset(x.astype(dtype), y, x[: n // 4].astype(dtype), y[: n // 4])


def save_dataset(directory, ds: Dataset) -> None:
    directory = Path(directory)
    for name in SPLITS:
        arr = getattr(ds, name)
        if name.startswith("y"):
            arr = np.asarray(arr, np.uint32)
        save_tensor(directory / f"{name}.da3t", arr)


def load_dataset(directory, dtype=np.float32) -> Dataset:
    directory = Path(directory)
    parts = {}
    for name in SPLITS:
        path = directory / f"{name}.da3t"
        if not path.exists():
            raise ConfigError(f"dataset file missing: {path}")
        arr = load_tensor(path)
        parts[name] = arr.astype(np.int64) if name.startswith("y") else arr.astype(dtype)
    return Dataset(**parts)
