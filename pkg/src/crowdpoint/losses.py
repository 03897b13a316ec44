"""Training losses with exact forward values and analytic gradients.

Three pieces: a focal cross-entropy over the localization heatmap whose
background term is suppressed (``nsf_loss``), an extra penalty applied only
on background pixels currently predicted confident (``fp_loss`` over the
region from ``fp_region``), and a mean-squared error on the density map
(``mse_loss``). ``total_loss`` combines them with fixed weights and splits
the gradient between the two prediction heads.

All gradients are with respect to the prediction grids and are exact
derivatives of the stated expressions; probability clamping (``prob_eps``)
zeroes the gradient on clamped pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from .core import DataValidationError, DenseGrid

# Fixed suppression factor on the background term; not a tuning knob.
NEG_WEIGHT = 1.0 / 16.0


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    delta: float = 4.0
    fp_region_thresh: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1000.0
    prob_eps: float = 1e-7

    neg_weight: ClassVar[float] = NEG_WEIGHT

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise DataValidationError("gamma and delta must be >= 0")
        if not 0.0 < self.fp_region_thresh < 1.0:
            raise DataValidationError("fp_region_thresh must lie in (0, 1)")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise DataValidationError("loss weights must be >= 0")
        if not 0.0 < self.prob_eps < 0.5:
            raise DataValidationError("prob_eps must lie in (0, 0.5)")


@dataclass(frozen=True)
class LossResult:
    """Scalar loss plus its gradient with respect to the prediction grid."""

    value: float
    grad: DenseGrid


@dataclass(frozen=True)
class TotalLoss:
    """Weighted sum of the three losses with per-head gradient grids."""

    value: float
    loc_grad: DenseGrid
    count_grad: DenseGrid


def _check_shapes(a: DenseGrid, b: DenseGrid) -> None:
    if a.shape != b.shape:
        raise DataValidationError(f"shape mismatch: {a.shape} vs {b.shape}")


def _clamp(pred: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Clamp probabilities into [eps, 1-eps]; also return the pass-through mask."""
    q = np.clip(pred, eps, 1.0 - eps)
    live = (pred >= eps) & (pred <= 1.0 - eps)
    return q, live


def nsf_loss(pred: DenseGrid, gt_heatmap: DenseGrid, cfg: LossConfig) -> LossResult:
    """Focal cross-entropy over the heatmap with a suppressed background term.

    Pixels where the target is exactly 1 (head centers) take the positive
    branch ``(1-q)^gamma * log q``; every other pixel takes the background
    branch ``NEG_WEIGHT * (1-p)^delta * q^gamma * log(1-q)``, where the
    ``(1-p)^delta`` factor fades the penalty near head centers. The sum is
    negated and divided by the number of positives (floored at 1 so the
    loss stays defined on head-free crops).
    """
    _check_shapes(pred, gt_heatmap)
    g = gt_heatmap.values
    if g.min() < 0.0 or g.max() > 1.0:
        raise DataValidationError("ground-truth heatmap values must lie in [0, 1]")
    q, live = _clamp(pred.values, cfg.prob_eps)
    pos = g == 1.0
    m = max(1, int(pos.sum()))

    log_q = np.log(q)
    log_1q = np.log1p(-q)
    one_minus_q = 1.0 - q

    pos_terms = one_minus_q**cfg.gamma * log_q
    neg_terms = NEG_WEIGHT * (1.0 - g) ** cfg.delta * q**cfg.gamma * log_1q
    value = -(pos_terms[pos].sum() + neg_terms[~pos].sum()) / m

    # d/dq of the branch terms, negated and averaged like the loss
    pos_grad = (cfg.gamma * one_minus_q ** (cfg.gamma - 1.0) * log_q
                - one_minus_q**cfg.gamma / q) / m
    neg_grad = -(NEG_WEIGHT * (1.0 - g) ** cfg.delta
                 * (cfg.gamma * q ** (cfg.gamma - 1.0) * log_1q
                    - q**cfg.gamma / one_minus_q)) / m
    grad = np.where(pos, pos_grad, neg_grad)
    grad[~live] = 0.0
    return LossResult(float(value), DenseGrid(grad))


def fp_region(gt_heatmap: DenseGrid, pred: DenseGrid, cfg: LossConfig) -> np.ndarray:
    """Flat row-major indices of background pixels predicted above threshold.

    Background means the target is exactly 0 (truncated-kernel generation
    guarantees such pixels exist away from heads).
    """
    _check_shapes(gt_heatmap, pred)
    mask = (gt_heatmap.values == 0.0) & (pred.values > cfg.fp_region_thresh)
    return np.flatnonzero(mask.ravel())


def fp_loss(pred: DenseGrid, region: np.ndarray, cfg: LossConfig) -> LossResult:
    """Confidence penalty averaged over a fixed false-positive pixel set.

    The region is treated as a constant: no gradient flows through its
    membership, and an empty region yields loss 0 with zero gradient.
    """
    region = np.asarray(region, dtype=np.intp).ravel()
    n_pix = pred.values.size
    if region.size and (region.min() < 0 or region.max() >= n_pix):
        raise DataValidationError("false-positive region index out of range")
    if region.size == 0:
        return LossResult(0.0, DenseGrid(np.zeros(pred.shape)))
    flat = pred.values.ravel()[region]
    q, live = _clamp(flat, cfg.prob_eps)
    log_1q = np.log1p(-q)
    value = -(q**cfg.gamma * log_1q).sum() / region.size
    grad_vals = -(cfg.gamma * q ** (cfg.gamma - 1.0) * log_1q
                  - q**cfg.gamma / (1.0 - q)) / region.size
    grad_vals[~live] = 0.0
    grad = np.zeros(n_pix)
    grad[region] = grad_vals
    return LossResult(float(value), DenseGrid(grad.reshape(pred.shape)))


def mse_loss(pred_density: DenseGrid, gt_density: DenseGrid) -> LossResult:
    """Mean squared error over the density map."""
    _check_shapes(pred_density, gt_density)
    diff = pred_density.values - gt_density.values
    n = diff.size
    value = float((diff * diff).sum() / n)
    return LossResult(value, DenseGrid((2.0 / n) * diff))


def total_loss(nsf: LossResult, fp: LossResult, reg: LossResult,
               cfg: LossConfig) -> TotalLoss:
    """Combine the three losses; split gradients by prediction head.

    The localization head receives the heatmap-loss gradients; the counting
    head receives only the (weighted) density-regression gradient.
    """
    _check_shapes(nsf.grad, fp.grad)
    value = nsf.value + cfg.lambda1 * fp.value + cfg.lambda2 * reg.value
    loc_grad = DenseGrid(nsf.grad.values + cfg.lambda1 * fp.grad.values)
    count_grad = DenseGrid(cfg.lambda2 * reg.grad.values)
    return TotalLoss(float(value), loc_grad, count_grad)
