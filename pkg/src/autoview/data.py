"""Datasets: procedural colored shapes, or a folder of class subdirectories."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

SHAPES = ("disk", "square", "triangle", "plus", "ring", "diamond", "bar", "cross")
TEST_SEED_OFFSET = 1_000_003


@dataclass
class ImageSet:
    images: np.ndarray  # (N, 3, S, S) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64, dense from 0
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def _smooth_mask(sd: np.ndarray, soft: float) -> np.ndarray:
    return np.clip(0.5 - sd / soft, 0.0, 1.0)


def _shape_distance(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Approximate signed distance (negative inside) of a shape of radius r at the origin."""
    if kind == "disk":
        return np.hypot(u, v) - r
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) - 0.8 * r
    if kind == "diamond":
        return (np.abs(u) + np.abs(v)) / math.sqrt(2) - 0.75 * r
    if kind == "ring":
        return np.abs(np.hypot(u, v) - 0.75 * r) - 0.22 * r
    if kind == "bar":
        return np.maximum(np.abs(u) - r, np.abs(v) - 0.3 * r)
    if kind == "plus":
        a = np.maximum(np.abs(u) - r, np.abs(v) - 0.28 * r)
        b = np.maximum(np.abs(v) - r, np.abs(u) - 0.28 * r)
        return np.minimum(a, b)
    if kind == "cross":
        p, q = (u + v) / math.sqrt(2), (u - v) / math.sqrt(2)
        a = np.maximum(np.abs(p) - r, np.abs(q) - 0.25 * r)
        b = np.maximum(np.abs(q) - r, np.abs(p) - 0.25 * r)
        return np.minimum(a, b)
    if kind == "triangle":
        # equilateral, pointing up (v grows downward)
        k = math.sqrt(3)
        d1 = v - 0.5 * r
        d2 = (-k * u - v) / 2 - 0.5 * r
        d3 = (k * u - v) / 2 - 0.5 * r
        return np.maximum(np.maximum(d1, d2), d3)
    raise ValueError(kind)


def render_shape(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    kind = SHAPES[label % len(SHAPES)]
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    # textured background: two colors mixed by an oriented sinusoid plus noise
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(1.0, 4.0) * 2 * math.pi / size
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase)
    wave = np.clip(wave + rng.normal(0, 0.15, wave.shape), 0, 1)
    bg = c0[:, None, None] * (1 - wave) + c1[:, None, None] * wave
    # foreground shape
    r = rng.uniform(0.22, 0.34) * size
    cx = size / 2 + rng.uniform(-0.15, 0.15) * size
    cy = size / 2 + rng.uniform(-0.15, 0.15) * size
    ang = rng.uniform(-0.3, 0.3)
    u = (xs - cx) * math.cos(ang) + (ys - cy) * math.sin(ang)
    v = -(xs - cx) * math.sin(ang) + (ys - cy) * math.cos(ang)
    mask = _smooth_mask(_shape_distance(kind, u, v, r), soft=1.0)
    fg = rng.uniform(0, 1, 3)
    img = bg * (1 - mask) + fg[:, None, None] * mask
    return np.clip(img, 0, 1)


def synthetic_shapes(num_classes: int = 8, per_class: int = 64, size: int = 32, seed: int = 0) -> ImageSet:
    """Deterministic function of its arguments."""
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"synthetic-shapes supports 1..{len(SHAPES)} classes")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.stack([render_shape(rng, int(c), size) for c in labels]).astype(np.float32)
    return ImageSet(images, labels.astype(np.int64), num_classes)


def folder_images(root: str, size: int) -> ImageSet:
    """root/<class>/<image> with classes sorted by name; 8-bit RGB decoded to [0, 1]."""
    from PIL import Image

    root_path = Path(root)
    if not root_path.is_dir():
        raise FileNotFoundError(f"dataset root {root!r} is not a directory")
    classes = sorted(p.name for p in root_path.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        for f in sorted((root_path / name).iterdir()):
            if f.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}:
                continue
            with Image.open(f) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.uint8)
            images.append(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)
            labels.append(label)
    if not images:
        raise ValueError(f"no images found under {root!r}")
    return ImageSet(np.stack(images), np.asarray(labels, dtype=np.int64), len(classes))


def load_splits(spec) -> Tuple[ImageSet, ImageSet]:
    """(train, test) for a DatasetConfig."""
    if spec.kind == "synthetic-shapes":
        train = synthetic_shapes(spec.num_classes, spec.samples_per_class, spec.image_size, spec.seed)
        test = synthetic_shapes(spec.num_classes, spec.test_samples_per_class, spec.image_size,
                                spec.seed + TEST_SEED_OFFSET)
        return train, test
    train = folder_images(str(Path(spec.root) / "train"), spec.image_size)
    test_root = Path(spec.root) / "test"
    test = folder_images(str(test_root), spec.image_size) if test_root.is_dir() else train
    return train, test
