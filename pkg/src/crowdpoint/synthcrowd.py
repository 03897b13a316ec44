"""Deterministic synthetic crowd scenes for desk-scale experiments.

Each scene is a grayscale image with N heads at integer pixel positions.
A head of radius r is a radial cosine blob, intensity (1 + cos(pi*d/r))/2
for distance d <= r and exactly 0 outside, so head centers hit 1.0 and
the background is exactly 0 before noise. Blobs compose by per-pixel max.
Heads keep a pairwise minimum separation (rejection sampling) and stay
fully inside the image; the annotation box is the blob's bounding square
(side 2r).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DataValidationError, DenseGrid, ImageRecord, PointAnnotation, Rng

MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    count_range: tuple[int, int] = (5, 15)
    radius_range: tuple[float, float] = (2.0, 6.0)
    min_separation: float = 6.0
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 4:
            raise DataValidationError("image_size must be at least 4")
        lo, hi = self.count_range
        if not 1 <= lo <= hi:
            raise DataValidationError("count_range must satisfy 1 <= min <= max")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise DataValidationError("radius_range must satisfy 0 < min <= max")
        if self.min_separation < 2 * rlo:
            raise DataValidationError(
                "min_separation must be at least twice the minimum radius"
            )
        if self.noise_std < 0:
            raise DataValidationError("noise_std must be non-negative")


def _render_blob(canvas: np.ndarray, x: int, y: int, radius: float) -> None:
    reach = int(math.floor(radius))
    y0, y1 = y - reach, y + reach
    x0, x1 = x - reach, x + reach
    ys = np.arange(y0, y1 + 1)[:, None]
    xs = np.arange(x0, x1 + 1)[None, :]
    d = np.sqrt((ys - y) ** 2 + (xs - x) ** 2)
    blob = 0.5 * (1.0 + np.cos(np.pi * np.minimum(d, radius) / radius))
    blob[d > radius] = 0.0
    patch = canvas[y0:y1 + 1, x0:x1 + 1]
    np.maximum(patch, blob, out=patch)


def generate_scene(cfg: SceneConfig, rng: Rng, image_id: str = "scene") -> ImageRecord:
    """One scene: placed blobs, clamped Gaussian noise, point annotations."""
    size = cfg.image_size
    n = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    placed: list[tuple[int, int, float]] = []
    attempts = 0
    while len(placed) < n:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise DataValidationError(
                f"could not place {n} heads with separation "
                f">= {cfg.min_separation} in a {size}px image "
                f"({MAX_PLACEMENT_ATTEMPTS} attempts)"
            )
        r = float(rng.uniform(cfg.radius_range[0], cfg.radius_range[1]))
        margin = int(math.ceil(r))
        if size - margin <= margin:
            continue
        x = int(rng.integers(margin, size - margin))
        y = int(rng.integers(margin, size - margin))
        if all(
            math.hypot(x - px, y - py) >= cfg.min_separation
            for px, py, _ in placed
        ):
            placed.append((x, y, r))

    canvas = np.zeros((size, size))
    for x, y, r in placed:
        _render_blob(canvas, x, y, r)
    if cfg.noise_std > 0:
        canvas = canvas + rng.normal(0.0, cfg.noise_std, canvas.shape)
        np.clip(canvas, 0.0, 1.0, out=canvas)
    points = tuple(
        PointAnnotation(float(x), float(y), 2.0 * r, 2.0 * r) for x, y, r in placed
    )
    return ImageRecord(image_id, size, size, points, DenseGrid(canvas))


def generate_split(cfg: SceneConfig, n_train: int, n_val: int, n_test: int,
                   seed: int | None = None):
    """Three disjoint scene lists from one master seed.

    Every scene draws from its own child stream, so scene i of a split is
    stable no matter how many scenes follow it.
    """
    if min(n_train, n_val, n_test) < 0:
        raise DataValidationError("split sizes must be non-negative")
    master = Rng(cfg.seed if seed is None else seed)
    split_rngs = master.split(3)
    out = []
    for name, count, split_rng in zip(
        ("train", "val", "test"), (n_train, n_val, n_test), split_rngs
    ):
        scene_rngs = split_rng.split(count) if count else []
        out.append([
            generate_scene(cfg, scene_rng, f"{name}-{i:04d}")
            for i, scene_rng in enumerate(scene_rngs)
        ])
    return tuple(out)
