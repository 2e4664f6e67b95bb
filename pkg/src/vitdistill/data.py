"""Synthetic image datasets and their on-disk format.

A dataset directory holds ``images.bin`` (little-endian float32, ``[N, C, H, W]``
row-major) and ``index.json`` with the labels, the generator settings and the
per-channel normalisation that was applied.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .vit import ConfigError

GENERATORS = ("shapes", "gaussian_textures")
SHAPES = ("square", "circle", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
INDEX = "index.json"
IMAGES = "images.bin"


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_samples: int
    image_size: int = 16
    num_classes: int = 4
    generator: str = "shapes"
    seed: int = 0
    channels: int = 3
    noise: float = 0.15

    def __post_init__(self):
        if self.num_samples < 1 or self.image_size < 4:
            raise ConfigError("num_samples must be >= 1 and image_size >= 4")
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}, got {self.generator!r}")
        limit = len(SHAPES) if self.generator == "shapes" else 8
        if not 2 <= self.num_classes <= limit:
            raise ConfigError(f"{self.generator} supports 2..{limit} classes, got {self.num_classes}")


@dataclass
class Dataset:
    images: np.ndarray          # [N, C, H, W] float32
    labels: np.ndarray          # [N] int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        w = max(r / 3, 0.75)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "hbar":
        return (np.abs(dy) <= max(r / 3, 0.75)) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= max(r / 3, 0.75)) & (np.abs(dy) <= r)
    raise ValueError(kind)


def _draw_shape(rng, label: int, spec: SyntheticDatasetSpec) -> np.ndarray:
    s = spec.image_size
    r = rng.uniform(0.18, 0.32) * s
    cy, cx = rng.uniform(r, s - r, size=2)
    mask = _shape_mask(SHAPES[label], s, cy, cx, r)
    fg = rng.uniform(0.4, 1.0, size=spec.channels)
    bg = rng.uniform(0.0, 0.35, size=spec.channels)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    img = img + spec.noise * rng.standard_normal(img.shape)
    return img


def _draw_texture(rng, label: int, spec: SyntheticDatasetSpec) -> np.ndarray:
    s = spec.image_size
    # class sets the spatial frequency band and orientation of a noisy grating
    freq = (1.0 + (label // 2)) * 2.0 * np.pi / s * (1 + rng.uniform(-0.1, 0.1))
    theta = (label % 2) * np.pi / 2 + rng.uniform(-0.2, 0.2)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    grating = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    gains = rng.uniform(0.5, 1.0, size=spec.channels)
    img = gains[:, None, None] * grating[None]
    return img + spec.noise * 3 * rng.standard_normal(img.shape)


def generate(spec: SyntheticDatasetSpec) -> tuple[Dataset, dict]:
    """Class-balanced, seed-deterministic dataset normalised per channel."""
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(spec.num_samples) % spec.num_classes
    labels = labels[rng.permutation(spec.num_samples)]
    draw = _draw_shape if spec.generator == "shapes" else _draw_texture
    images = np.stack([draw(rng, int(y), spec) for y in labels])
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3)) + 1e-8
    images = (images - mean[None, :, None, None]) / std[None, :, None, None]
    norm = {"mean": mean.tolist(), "std": std.tolist()}
    return Dataset(images.astype(np.float32), labels.astype(np.int64), spec.num_classes), norm


def save_dataset(directory, dataset: Dataset, spec: SyntheticDatasetSpec | None = None,
                 normalization: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / IMAGES).write_bytes(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    index = {
        "num_samples": len(dataset),
        "shape": list(dataset.images.shape[1:]),
        "num_classes": dataset.num_classes,
        "labels": dataset.labels.tolist(),
        "spec": asdict(spec) if spec else None,
        "normalization": normalization,
    }
    (directory / INDEX).write_text(json.dumps(index, sort_keys=True) + "\n")
    return directory


def generate_dataset(spec: SyntheticDatasetSpec, directory) -> Path:
    dataset, norm = generate(spec)
    return save_dataset(directory, dataset, spec, norm)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = json.loads((directory / INDEX).read_text())
    shape = [index["num_samples"], *index["shape"]]
    images = np.frombuffer((directory / IMAGES).read_bytes(), dtype="<f4")
    if images.size != int(np.prod(shape)):
        raise ConfigError(f"{directory / IMAGES} holds {images.size} values, index expects {shape}")
    return Dataset(images.reshape(shape).astype(np.float32),
                   np.asarray(index["labels"], dtype=np.int64), index["num_classes"])


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
