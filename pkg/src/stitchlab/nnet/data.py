"""Procedurally rendered image classification data.

Each class is a shape or texture family (disk, ring, square, frame, plus,
cross, two stripe orientations, triangle, checkerboard) drawn with random
position, size, rotation jitter, contrast and polarity on a noisy sloped
background. Generation is a pure function of ``(seed, split)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

SPLITS = ("Train", "Test")
_SPLIT_STREAM = {"Train": 0, "Test": 1}
N_FAMILIES = 10


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, w, h, c) float32
    labels: np.ndarray  # (n,) int64
    split: str
    generator_seed: int
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int | None) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return Dataset(self.inputs[:count], self.labels[:count], self.split, self.generator_seed, self.classes)


def _family_mask(family, u, v, d, r, rng):
    """Boolean masks for one family; ``u, v`` rotated coords, ``d`` radius, all (n, w, h)."""
    n = u.shape[0]
    thick = rng.uniform(0.12, 0.2, size=(n, 1, 1))
    if family == 0:
        return d < r
    if family == 1:
        return np.abs(d - r) < thick
    box = np.maximum(np.abs(u), np.abs(v))
    if family == 2:
        return box < 0.85 * r
    if family == 3:
        return np.abs(box - 0.85 * r) < thick
    if family in (4, 5):
        return ((np.abs(u) < thick) & (np.abs(v) < r)) | ((np.abs(v) < thick) & (np.abs(u) < r))
    if family in (6, 7):
        freq = rng.uniform(2.2, 3.0, size=(n, 1, 1)) * np.pi
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
        return (np.sin(freq * v + phase) > 0) & (d < r + 0.25)
    if family == 8:
        # equilateral triangle: inside three half-planes
        inside = np.ones_like(d, dtype=bool)
        for k in range(3):
            ang = np.pi / 2 + 2 * np.pi * k / 3
            inside &= (u * np.cos(ang) + v * np.sin(ang)) < 0.5 * r
        return inside
    if family == 9:
        freq = rng.uniform(2.2, 3.0, size=(n, 1, 1)) * np.pi
        return (np.sin(freq * u) * np.sin(freq * v) > 0) & (d < r + 0.2)
    raise ValueError(family)


# rotation base angle and jitter per family; orientation-defined classes get small jitter
_ROTATION = {4: (0.0, np.pi / 14), 5: (np.pi / 4, np.pi / 14), 6: (0.0, np.pi / 10), 7: (np.pi / 2, np.pi / 10)}


def render(family: int, count: int, shape, rng: np.random.Generator, noise: float = 0.3) -> np.ndarray:
    w, h, c = shape
    xs = np.linspace(-1, 1, w)
    ys = np.linspace(-1, 1, h)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    cx = rng.uniform(-0.25, 0.25, size=(count, 1, 1))
    cy = rng.uniform(-0.25, 0.25, size=(count, 1, 1))
    r = rng.uniform(0.4, 0.72, size=(count, 1, 1))
    base, jitter = _ROTATION.get(family, (0.0, np.pi))
    theta = base + rng.uniform(-jitter, jitter, size=(count, 1, 1))
    dx, dy = gx[None] - cx, gy[None] - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    d = np.sqrt(dx**2 + dy**2)
    mask = _family_mask(family, u, v, d, r, rng).astype(np.float64)
    contrast = rng.uniform(0.7, 1.3, size=(count, 1, 1)) * rng.choice([-1.0, 1.0], size=(count, 1, 1))
    slope = rng.normal(0, 0.25, size=(count, 2, 1, 1))
    background = rng.uniform(-0.3, 0.3, size=(count, 1, 1)) + slope[:, 0] * gx[None] + slope[:, 1] * gy[None]
    img = background + contrast * mask + noise * rng.normal(size=(count, w, h))
    img = np.repeat(img[..., None], c, axis=-1)
    if c > 1:
        img = img * rng.uniform(0.6, 1.0, size=(count, 1, 1, c))
    return img


def synth_dataset(seed: int, n: int, classes: int = 10, shape=(16, 16, 1), split: str = "Train",
                  noise: float = 0.3) -> Dataset:
    """Balanced, shuffled dataset of ``n`` images; ``split`` selects an independent stream."""
    if classes < 2 or classes > N_FAMILIES:
        raise ConfigError(f"classes must lie in [2, {N_FAMILIES}]")
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = np.empty((n, *shape), dtype=np.float32)
    for k in range(classes):
        idx = np.flatnonzero(labels == k)
        images[idx] = render(k, idx.size, shape, rng, noise)
    return Dataset(images, labels.astype(np.int64), split, seed, classes)


def synth_splits(seed: int, n_train: int, n_test: int, classes: int = 10, shape=(16, 16, 1),
                 noise: float = 0.3) -> tuple[Dataset, Dataset]:
    return (synth_dataset(seed, n_train, classes, shape, "Train", noise),
            synth_dataset(seed, n_test, classes, shape, "Test", noise))
