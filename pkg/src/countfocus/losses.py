"""Loss functions with analytic gradients.

Three losses supervise the three network branches: a class-balanced focal loss
over per-pixel segmentation probabilities, a focal loss over global-density
level probabilities, and a combined L2+L1 regression loss over density maps.
All losses sum (rather than average) over their elements; the lambda weights
of the total absorb the resulting scale difference.

Each function returns a :class:`LossValue` holding the scalar and the gradient
with respect to the predicted input, so the autodiff core can splice them into
a computation graph as custom leaf losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .supervision import DensityMap, GlobalDensityLabel, SegmentationMap

# floor applied to probabilities before log; keeps values and gradients finite
PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"loss value is not finite: {self.value}")
        if not np.isfinite(self.gradient).all():
            raise ValueError("loss gradient contains non-finite entries")


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 1.0
    lambda_s: float = 10.0
    lambda_c: float = 1.0

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_s, self.lambda_c) < 0:
            raise ValueError("loss weights must be non-negative")


def _focal_terms(p_true: np.ndarray, gamma: float):
    """Value and d/dp of -(1-p)^gamma * log(p) at the clamped true-class prob."""
    p = np.clip(p_true, PROB_EPS, None)
    one_minus = 1.0 - p
    logp = np.log(p)
    value = -(one_minus**gamma) * logp
    if gamma == 0.0:
        dvalue = -1.0 / p
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            dvalue = gamma * one_minus ** (gamma - 1.0) * logp - one_minus**gamma / p
        # p == 1 with gamma < 1: the derivative limit is 0
        dvalue = np.where(one_minus == 0.0, 0.0, dvalue)
    # clamped region contributes no gradient
    dvalue = np.where(p_true < PROB_EPS, 0.0, dvalue)
    return value, dvalue


def seg_focal_loss(probs: np.ndarray, target: SegmentationMap, gamma_s: float = 2.0) -> LossValue:
    """Per-pixel class-balanced focal loss over an (H, W, 2) probability map.

    Each pixel contributes -alpha^l (1 - p_l)^gamma log(p_l) where l is the
    pixel's true class and alpha^l = 1 - |pixels of class l| / |pixels|.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t = target.values
    if probs.shape != (*t.shape, 2):
        raise ShapeMismatch(f"probs shape {probs.shape} vs target {t.shape}")
    if gamma_s < 0:
        raise ValueError("gamma_s must be >= 0")
    total = t.size
    n_fg = int(t.sum())
    alpha = np.array([1.0 - (total - n_fg) / total, 1.0 - n_fg / total])

    p_true = np.take_along_axis(probs, t[..., None].astype(np.intp), axis=-1)[..., 0]
    value, dvalue = _focal_terms(p_true, gamma_s)
    w = alpha[t]
    grad = np.zeros_like(probs)
    np.put_along_axis(grad, t[..., None].astype(np.intp), (w * dvalue)[..., None], axis=-1)
    return LossValue(value=float((w * value).sum()), gradient=grad)


def global_density_loss(
    probs: np.ndarray, target: GlobalDensityLabel, gamma_c: float = 2.0
) -> LossValue:
    """Focal loss over the (M+1)-way global-density class probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ShapeMismatch(f"expected a probability vector, got shape {probs.shape}")
    if not 0 <= target.level < len(probs):
        raise ShapeMismatch(f"target level {target.level} outside {len(probs)} classes")
    value, dvalue = _focal_terms(probs[target.level], gamma_c)
    grad = np.zeros_like(probs)
    grad[target.level] = dvalue
    return LossValue(value=float(value), gradient=grad)


def density_regression_loss(pred: np.ndarray, target: DensityMap) -> LossValue:
    """Combined L2+L1 loss: 1/2 sum(r^2) + sum(|r|) with r = pred - target."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != target.values.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} vs target {target.values.shape}")
    r = pred - target.values
    value = 0.5 * float((r * r).sum()) + float(np.abs(r).sum())
    # sign(0) = 0 keeps the perfect-fit gradient exactly zero
    grad = r + np.sign(r)
    return LossValue(value=value, gradient=grad)


def total_loss(lr: float, ls: float, lc: float, w: LossWeights = LossWeights()) -> float:
    """Weighted sum of the three branch losses."""
    return w.lambda_r * lr + w.lambda_s * ls + w.lambda_c * lc
