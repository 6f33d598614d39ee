"""Synthetic detection scenes: colored rectangles on a gray background.

Rectangles are drawn on the pixel grid, so every box corner is an exact
multiple of 1/image_size. That keeps the side-distance identities
(l + r == w, t + b == h) bit-exact downstream and makes scenes reproducible
to the last bit from their seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .instances import Instance, make_instance
from .tensor import Tensor


@dataclass(frozen=True)
class SceneSpec:
    """Generator knobs. Per-class pixel sizes are Gaussian so dataset
    statistics are informative; means are spread out to keep classes
    distinguishable by scale as well as by texture."""

    image_size: int = 64
    num_classes: int = 3
    noise_sigma: float = 0.05
    min_instances: int = 1
    max_instances: int = 4
    size_means: tuple[float, ...] = (18.0, 12.0, 26.0)
    size_stds: tuple[float, ...] = (3.0, 2.0, 4.0)
    background: float = 0.12

    def __post_init__(self):
        if len(self.size_means) != self.num_classes or len(self.size_stds) != self.num_classes:
            raise ValueError("size_means/size_stds must have one entry per class")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("need 0 <= min_instances <= max_instances")


@dataclass
class Scene:
    image: Tensor  # [3, H, W], constant
    instances: list[Instance]  # paint order; later boxes occlude earlier ones
    seed: tuple[int, ...]  # entropy the scene was drawn from, e.g. (run seed, stream, index)


def class_colors(category: int) -> tuple[np.ndarray, np.ndarray]:
    """Primary/secondary paint colors from a fixed trigonometric palette."""
    phase = 2.1 * category
    primary = 0.55 + 0.4 * np.sin([phase + 0.3, phase + 2.4, phase + 4.5])
    return primary, primary * 0.45


def _paint(canvas: np.ndarray, category: int, x1: int, y1: int, x2: int, y2: int) -> None:
    """Fill [y1:y2, x1:x2] with the class texture: solid, 2px horizontal
    stripes, or a 2px checkerboard, cycling with the class index."""
    primary, secondary = class_colors(category)
    h, w = y2 - y1, x2 - x1
    patch = np.tile(primary, (h, w, 1))
    kind = category % 3
    if kind == 1:
        rows = (np.arange(h) // 2) % 2 == 1
        patch[rows] = secondary
    elif kind == 2:
        yy, xx = np.meshgrid(np.arange(h) // 2, np.arange(w) // 2, indexing="ij")
        patch[(yy + xx) % 2 == 1] = secondary
    canvas[y1:y2, x1:x2] = patch


def _sample_box(spec: SceneSpec, category: int, rng: np.random.Generator) -> tuple[int, int, int, int]:
    lo, hi = 3, spec.image_size - 2
    w = int(np.clip(round(rng.normal(spec.size_means[category], spec.size_stds[category])), lo, hi))
    h = int(np.clip(round(rng.normal(spec.size_means[category], spec.size_stds[category])), lo, hi))
    x1 = int(rng.integers(0, spec.image_size - w + 1))
    y1 = int(rng.integers(0, spec.image_size - h + 1))
    return x1, y1, x1 + w, y1 + h


def generate_scene(spec: SceneSpec, seed: tuple[int, ...]) -> Scene:
    rng = np.random.default_rng(seed)
    s = spec.image_size
    canvas = np.full((s, s, 3), spec.background)
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    instances = []
    for _ in range(n):
        category = int(rng.integers(spec.num_classes))
        x1, y1, x2, y2 = _sample_box(spec, category, rng)
        _paint(canvas, category, x1, y1, x2, y2)
        instances.append(make_instance(
            category,
            (x1 + x2) / 2 / s, (y1 + y2) / 2 / s,
            (x2 - x1) / s, (y2 - y1) / s,
            s, s))
    if spec.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, spec.noise_sigma, canvas.shape)
    return Scene(T.constant(canvas.transpose(2, 0, 1)), instances, seed)


def generate_dataset(spec: SceneSpec, seed: int, count: int) -> list[Scene]:
    """count scenes with independent per-scene streams; scene i only ever
    depends on (seed, i), so datasets are stable under count changes."""
    return [generate_scene(spec, (seed, i)) for i in range(count)]
