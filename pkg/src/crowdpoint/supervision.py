"""Ground-truth target generation from point annotations.

Two targets per scene: a full-resolution localization heatmap where each
head contributes a truncated Gaussian bump (peak exactly 1 at the head's
pixel, overlaps composed by per-pixel maximum), and a strided counting
density map where each head contributes exactly unit mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DataValidationError, DenseGrid, ImageRecord, PointAnnotation


@dataclass(frozen=True)
class SupervisionConfig:
    """Knobs for target generation.

    sigma_c: constant std-dev of the density kernel, in density-map pixels.
    knn_k / sigma_coeff: the heatmap std-dev per head is sigma_coeff times
        the summed distance to its knn_k nearest neighbors.
    sigma_d_min: floor applied to the adaptive std-dev (isolated or
        coincident heads would otherwise degenerate to zero width).
    truncate_radius_sigmas: kernel support radius in units of its std-dev;
        outside the support the target is exactly 0.
    density_stride: resolution divisor of the density map.
    """

    sigma_c: float = 3.0
    knn_k: int = 3
    sigma_coeff: float = 0.1
    sigma_d_min: float = 1.0
    truncate_radius_sigmas: float = 3.0
    density_stride: int = 2

    def __post_init__(self):
        if self.sigma_c <= 0 or self.sigma_coeff <= 0 or self.sigma_d_min <= 0:
            raise DataValidationError("sigma parameters must be strictly positive")
        if self.truncate_radius_sigmas <= 0:
            raise DataValidationError("truncate_radius_sigmas must be strictly positive")
        if self.knn_k < 1:
            raise DataValidationError("knn_k must be >= 1")
        if self.density_stride < 1:
            raise DataValidationError("density_stride must be >= 1")


def adaptive_sigma(points, index: int, cfg: SupervisionConfig) -> float:
    """Scale-adaptive Gaussian width for one head.

    Returns ``sigma_coeff`` times the summed Euclidean distance to the
    ``knn_k`` nearest other heads (all of them when fewer exist), floored
    at ``sigma_d_min``. An isolated head gets the floor directly.
    """
    if not 0 <= index < len(points):
        raise IndexError(f"point index {index} out of range for {len(points)} points")
    p = points[index]
    dists = [
        math.hypot(q.x - p.x, q.y - p.y)
        for j, q in enumerate(points)
        if j != index
    ]
    if not dists:
        return cfg.sigma_d_min
    dists.sort()
    raw = cfg.sigma_coeff * sum(dists[: cfg.knn_k])
    return max(raw, cfg.sigma_d_min)


def _nearest_pixel(coord: float, limit: int) -> int:
    # round half up (coords are non-negative), clipped into the grid
    return min(int(math.floor(coord + 0.5)), limit - 1)


def make_heatmap(record: ImageRecord, cfg: SupervisionConfig) -> DenseGrid:
    """Localization target at full resolution.

    Each head places a Gaussian bump centered on its nearest pixel, with
    adaptive width and hard truncation (exact zeros beyond the support
    radius). Overlapping bumps combine by per-pixel maximum, so every
    head-center pixel holds exactly 1.
    """
    h, w = record.height, record.width
    heat = np.zeros((h, w))
    pts = record.points
    for i, p in enumerate(pts):
        sigma = adaptive_sigma(pts, i, cfg)
        cx = _nearest_pixel(p.x, w)
        cy = _nearest_pixel(p.y, h)
        radius = cfg.truncate_radius_sigmas * sigma
        reach = int(math.floor(radius))
        x0, x1 = max(0, cx - reach), min(w - 1, cx + reach)
        y0, y1 = max(0, cy - reach), min(h - 1, cy + reach)
        dx = np.arange(x0, x1 + 1) - cx
        dy = np.arange(y0, y1 + 1) - cy
        d2 = dx[None, :] ** 2 + dy[:, None] ** 2
        bump = np.exp(-d2 / (2.0 * sigma * sigma))
        bump[d2 > radius * radius] = 0.0
        patch = heat[y0 : y1 + 1, x0 : x1 + 1]
        np.maximum(patch, bump, out=patch)
    return DenseGrid(heat)


def make_density(record: ImageRecord, cfg: SupervisionConfig) -> DenseGrid:
    """Counting target at ``density_stride`` resolution.

    Each head adds a truncated Gaussian kernel renormalized over its
    in-bounds pixels, so its mass is exactly 1 even at image borders and
    the grid total equals the head count.
    """
    s = cfg.density_stride
    gh = -(-record.height // s)
    gw = -(-record.width // s)
    dens = np.zeros((gh, gw))
    radius = cfg.truncate_radius_sigmas * cfg.sigma_c
    inv_two_var = 1.0 / (2.0 * cfg.sigma_c * cfg.sigma_c)
    for p in record.points:
        cx = p.x / s
        cy = p.y / s
        x0, x1 = max(0, int(math.ceil(cx - radius))), min(gw - 1, int(math.floor(cx + radius)))
        y0, y1 = max(0, int(math.ceil(cy - radius))), min(gh - 1, int(math.floor(cy + radius)))
        if x1 < x0 or y1 < y0:
            # support radius below half a pixel: put the unit mass on the
            # nearest pixel so the count-preservation contract still holds
            dens[_nearest_pixel(cy, gh), _nearest_pixel(cx, gw)] += 1.0
            continue
        dx = np.arange(x0, x1 + 1) - cx
        dy = np.arange(y0, y1 + 1) - cy
        d2 = dx[None, :] ** 2 + dy[:, None] ** 2
        kernel = np.exp(-d2 * inv_two_var)
        kernel[d2 > radius * radius] = 0.0
        ksum = kernel.sum()
        if ksum == 0.0:
            dens[_nearest_pixel(cy, gh), _nearest_pixel(cx, gw)] += 1.0
            continue
        dens[y0 : y1 + 1, x0 : x1 + 1] += kernel / ksum
    return DenseGrid(dens)
