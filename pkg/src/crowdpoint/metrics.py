"""Localization and counting metrics.

Localization follows point-matching rules: a prediction may claim a ground
truth point when their Euclidean distance is strictly below a per-point
radius derived from the annotated box. Two radii are scored side by side:

* ``small``: min(box_w, box_h) / 2, a tight criterion
* ``large``: sqrt(box_w**2 + box_h**2) / 2, a loose criterion

Among all one-to-one assignments the matcher maximizes the number of
matched pairs and, among those, minimizes the summed distance. Counts of
true/false positives and false negatives accumulate over a whole split
before precision/recall/F1 are formed (micro averaging).

Counting error compares predicted to annotated totals per image: mean
absolute error, root mean squared error, and the mean of |diff| / truth
over images with at least one annotation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import DataValidationError, ImageRecord, PointAnnotation
from .decoder import Detection

_MODES = ("small", "large")


def match_radius(point: PointAnnotation, mode: str) -> float:
    """Acceptance radius for one annotated point under the given mode."""
    if mode == "small":
        return min(point.box_w, point.box_h) / 2.0
    if mode == "large":
        return math.hypot(point.box_w, point.box_h) / 2.0
    raise DataValidationError(f"unknown match mode: {mode!r}")


class MatchResult(NamedTuple):
    tp: int
    fp: int
    fn: int
    pairs: list  # (detection index, point index, distance)


def match_points(
    detections: Sequence[Detection],
    points: Sequence[PointAnnotation],
    mode: str,
) -> MatchResult:
    """Optimal one-to-one matching of detections against annotated points.

    Maximizes pair count first, total distance (minimized) second. A pair is
    feasible only when its distance is strictly below the point's radius.
    """
    n, m = len(detections), len(points)
    if n == 0 or m == 0:
        return MatchResult(0, n, m, [])

    dist = np.empty((n, m))
    for j, p in enumerate(points):
        r = match_radius(p, mode)
        for i, d in enumerate(detections):
            dist[i, j] = math.hypot(d.x - p.x, d.y - p.y)
        dist[:, j] = np.where(dist[:, j] < r, dist[:, j], np.inf)

    feasible = np.isfinite(dist)
    if not feasible.any():
        return MatchResult(0, n, m, [])
    # a cost exceeding any feasible assignment total forces the solver to
    # exhaust feasible pairs before resorting to infeasible ones
    big = min(n, m) * float(dist[feasible].max()) + 1.0
    cost = np.where(feasible, dist, big)
    rows, cols = linear_sum_assignment(cost)
    pairs = [
        (int(i), int(j), float(dist[i, j]))
        for i, j in zip(rows, cols)
        if feasible[i, j]
    ]
    tp = len(pairs)
    return MatchResult(tp, n - tp, m - tp, pairs)


@dataclass(frozen=True)
class LocalizationScores:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "LocalizationScores":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall
            else 0.0
        )
        return cls(tp, fp, fn, precision, recall, f1)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass(frozen=True)
class CountingScores:
    mae: float
    rmse: float
    nae: Optional[float]

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "nae": self.nae}


def counting_scores(pairs: Sequence[tuple[float, float]]) -> CountingScores:
    """MAE / RMSE / NAE over (predicted, true) count pairs.

    NAE averages |error| / truth over pairs with truth > 0 and is None when
    no such pair exists.
    """
    if not pairs:
        raise DataValidationError("counting scores need at least one image")
    diffs = np.array([p - t for p, t in pairs])
    mae = float(np.abs(diffs).mean())
    rmse = float(np.sqrt((diffs**2).mean()))
    rel = [abs(p - t) / t for p, t in pairs if t > 0]
    nae = float(np.mean(rel)) if rel else None
    return CountingScores(mae, rmse, nae)


@dataclass(frozen=True)
class EvalReport:
    small: LocalizationScores
    large: LocalizationScores
    counting: CountingScores
    n_images: int
    threshold: float

    def to_dict(self) -> dict:
        return {
            "small": self.small.to_dict(),
            "large": self.large.to_dict(),
            "counting": self.counting.to_dict(),
            "n_images": self.n_images,
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            small=LocalizationScores(**d["small"]),
            large=LocalizationScores(**d["large"]),
            counting=CountingScores(**d["counting"]),
            n_images=d["n_images"],
            threshold=d["threshold"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def format_table(self) -> str:
        lines = [
            f"images: {self.n_images}   threshold: {self.threshold:g}",
            f"{'':8s}{'precision':>10s}{'recall':>10s}{'f1':>10s}"
            f"{'tp':>7s}{'fp':>7s}{'fn':>7s}",
        ]
        for name, s in (("small", self.small), ("large", self.large)):
            lines.append(
                f"{name:8s}{s.precision:>10.4f}{s.recall:>10.4f}{s.f1:>10.4f}"
                f"{s.tp:>7d}{s.fp:>7d}{s.fn:>7d}"
            )
        c = self.counting
        nae = f"{c.nae:.4f}" if c.nae is not None else "n/a"
        lines.append(f"counting: mae={c.mae:.4f}  rmse={c.rmse:.4f}  nae={nae}")
        return "\n".join(lines) + "\n"


def evaluate(
    samples: Sequence[tuple[Sequence[Detection], float, ImageRecord]],
    threshold: float,
) -> EvalReport:
    """Score a split: ``samples`` holds (detections, predicted count, record)."""
    if not samples:
        raise DataValidationError("evaluation needs at least one image")
    totals = {mode: [0, 0, 0] for mode in _MODES}
    count_pairs = []
    for detections, pred_count, record in samples:
        for mode in _MODES:
            res = match_points(detections, record.points, mode)
            acc = totals[mode]
            acc[0] += res.tp
            acc[1] += res.fp
            acc[2] += res.fn
        count_pairs.append((pred_count, float(record.count())))
    return EvalReport(
        small=LocalizationScores.from_counts(*totals["small"]),
        large=LocalizationScores.from_counts(*totals["large"]),
        counting=counting_scores(count_pairs),
        n_images=len(samples),
        threshold=threshold,
    )
