"""Heatmap decoding: local peaks -> thresholded detections -> counts.

A pixel is a peak candidate when it equals the maximum of its 3x3
neighborhood (clipped at borders). Flat plateaus would emit every tied
pixel, so each 4-connected equal-valued plateau of candidates keeps only
its first pixel in row-major order. Counting from a density map is just
the grid sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import DataValidationError, DenseGrid, ImageRecord

_PLATEAU_STRUCTURE = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class Detection:
    """A decoded head estimate: integer pixel position plus confidence."""

    x: int
    y: int
    confidence: float


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float
    search_lo: float = 0.3
    search_hi: float = 0.5
    search_step: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise DataValidationError("threshold must lie in (0, 1)")
        if self.search_lo > self.search_hi:
            raise DataValidationError("search_lo must not exceed search_hi")
        if self.search_step <= 0:
            raise DataValidationError("search_step must be positive")


def local_peaks(heatmap: DenseGrid) -> list[tuple[int, int, float]]:
    """Pixels equal to their (border-clipped) 3x3 neighborhood maximum.

    Returns (x, y, confidence) triples in row-major order, one
    representative per connected plateau of tied candidates.
    """
    v = heatmap.values
    window_max = ndimage.maximum_filter(v, size=3, mode="nearest")
    candidates = v == window_max
    # adjacent candidates always tie in value, so plain connected-component
    # labeling groups exactly the equal-valued plateaus
    labels, n_labels = ndimage.label(candidates, structure=_PLATEAU_STRUCTURE)
    if n_labels == 0:
        return []
    _, first_flat = np.unique(labels.ravel(), return_index=True)
    first_flat = first_flat[1:] if labels.ravel()[first_flat[0]] == 0 else first_flat
    first_flat = np.sort(first_flat)
    w = heatmap.width
    return [(int(i % w), int(i // w), float(v.flat[i])) for i in first_flat]


def decode(heatmap: DenseGrid, cfg: DecodeConfig) -> list[Detection]:
    """Peaks at confidence >= threshold, strongest first (ties: row-major)."""
    w = heatmap.width
    kept = [
        Detection(x, y, conf)
        for x, y, conf in local_peaks(heatmap)
        if conf >= cfg.threshold
    ]
    kept.sort(key=lambda d: (-d.confidence, d.y * w + d.x))
    return kept


def count_from_density(density: DenseGrid) -> float:
    """Estimated object count: the density-map sum."""
    return float(density.values.sum())


def threshold_grid(cfg: DecodeConfig) -> list[float]:
    """The search grid [search_lo, search_lo+step, ...], inclusive of search_hi."""
    taus = []
    i = 0
    while True:
        tau = cfg.search_lo + i * cfg.search_step
        if tau > cfg.search_hi + 1e-12:
            break
        # accumulated rounding may land a hair off the bound on either side
        taus.append(cfg.search_hi if abs(tau - cfg.search_hi) <= 1e-12 else tau)
        i += 1
    return taus


def search_threshold(val_set, cfg: DecodeConfig, mode: str = "large") -> float:
    """Pick the grid threshold maximizing micro-averaged F1 on a validation set.

    ``val_set`` is a list of (heatmap, ImageRecord) pairs. Ties break toward
    the larger threshold.
    """
    from .metrics import match_points  # deferred: metrics has no runtime dep on us

    if not val_set:
        raise DataValidationError("threshold search needs a non-empty validation set")
    per_image = [
        ([Detection(x, y, c) for x, y, c in local_peaks(heatmap)], record)
        for heatmap, record in val_set
    ]

    best_tau, best_f1 = None, -1.0
    for tau in threshold_grid(cfg):
        tp = fp = fn = 0
        for peaks, record in per_image:
            dets = [d for d in peaks if d.confidence >= tau]
            res = match_points(dets, record.points, mode)
            tp, fp, fn = tp + res.tp, fp + res.fp, fn + res.fn
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if f1 >= best_f1:
            best_tau, best_f1 = tau, f1
    return best_tau


def write_detections(rows, path) -> None:
    """Serialize per-image detections as JSON lines.

    ``rows`` iterates over (image id, detections) pairs; each line is
    ``{"id": ..., "points": [[x, y, confidence], ...]}``.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, detections in rows:
            line = {
                "id": image_id,
                "points": [[d.x, d.y, d.confidence] for d in detections],
            }
            fh.write(json.dumps(line) + "\n")


def read_detections(path) -> list[tuple[str, list[Detection]]]:
    """Inverse of :func:`write_detections`."""
    from .core import FormatError

    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                dets = [Detection(int(x), int(y), float(c)) for x, y, c in obj["points"]]
                rows.append((str(obj["id"]), dets))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: line {lineno}: {e}") from e
    return rows
