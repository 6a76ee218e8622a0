"""Referring-aware fusion loss: BCE + focal + pixel-adaptive Dice.

All losses take probabilities (not logits) and return ``(value, grad)``
where ``grad`` is d value / d p. Probabilities are clamped to
``[clamp, 1 - clamp]`` before any log; the gradient is that of the clamped
expression and is zero where clamping is active.

With ``normalize="sum"`` the pixel terms are summed over every element and
the Dice term is summed over batch items. ``"mean"`` divides the pixel terms
by the element count and averages Dice over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

ADAPTIVE_MODES = ("abs-diff", "focal-style")


@dataclass(frozen=True)
class RafConfig:
    lambda_bce: float = 1.0
    lambda_focal: float = 1.0
    lambda_dice: float = 1.0
    alpha: float = 0.25
    gamma: float = 2.0
    eps: float = 1.0
    adaptive_mode: str = "abs-diff"
    clamp: float = 1e-7
    normalize: str = "sum"

    def __post_init__(self):
        lams = (self.lambda_bce, self.lambda_focal, self.lambda_dice)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValidationError("loss weights must be nonnegative with at least one positive")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValidationError("gamma must be nonnegative")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")
        if self.adaptive_mode not in ADAPTIVE_MODES:
            raise ValidationError(f"adaptive_mode must be one of {ADAPTIVE_MODES}")
        if not 0 < self.clamp < 0.5:
            raise ValidationError("clamp must lie in (0, 0.5)")
        if self.normalize not in ("sum", "mean"):
            raise ValidationError("normalize must be 'sum' or 'mean'")


@dataclass
class LossOutput:
    total: float
    bce: float
    focal: float
    dice: float
    grad_p: np.ndarray


def _validate(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("targets must be binary (0 or 1)")
    if not np.all(np.isfinite(p)):
        raise ValidationError("predictions must be finite")
    return p, y


def _clamped(p, clamp):
    pc = np.clip(p, clamp, 1 - clamp)
    inside = (p >= clamp) & (p <= 1 - clamp)
    return pc, inside


def _pixel_scale(p, normalize):
    return 1.0 if normalize == "sum" else 1.0 / p.size


def bce(p, y, clamp=1e-7, normalize="sum"):
    p, y = _validate(p, y)
    pc, inside = _clamped(p, clamp)
    scale = _pixel_scale(p, normalize)
    per_pixel = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    grad = (-y / pc + (1 - y) / (1 - pc)) * inside
    return float(per_pixel.sum() * scale), grad * scale


def focal(p, y, alpha=0.25, gamma=2.0, clamp=1e-7, normalize="sum"):
    p, y = _validate(p, y)
    pc, inside = _clamped(p, clamp)
    scale = _pixel_scale(p, normalize)
    q = 1 - pc
    log_p, log_q = np.log(pc), np.log(q)
    pos = alpha * y * q**gamma
    neg = (1 - alpha) * (1 - y) * pc**gamma
    loss = -(pos * log_p + neg * log_q)
    # d/dp [q^g log p] = -g q^(g-1) log p + q^g / p ; d/dp [p^g log q] = g p^(g-1) log q - p^g / q
    if gamma == 0:
        d_pos = alpha * y / pc
        d_neg = -(1 - alpha) * (1 - y) / q
    else:
        d_pos = alpha * y * (-gamma * q ** (gamma - 1) * log_p + q**gamma / pc)
        d_neg = (1 - alpha) * (1 - y) * (gamma * pc ** (gamma - 1) * log_q - pc**gamma / q)
    grad = -(d_pos + d_neg) * inside
    return float(loss.sum() * scale), grad * scale


def adaptive_weights(p, y, mode="abs-diff", gamma=2.0):
    """Per-pixel Dice weights: ``|p - y|`` or ``(1 - p) ** gamma``."""
    if mode == "abs-diff":
        return np.abs(p - y)
    if mode == "focal-style":
        return (1 - p) ** gamma
    raise ValidationError(f"unknown adaptive mode {mode!r}")


def _dice_terms(p, y, weights, eps):
    inter = (weights * p * y).sum()
    denom = (weights * p).sum() + (weights * y).sum() + eps
    return inter, denom


def adaptive_dice(p, y, mode="abs-diff", gamma=2.0, eps=1.0, normalize="sum", weights=None):
    """Weighted Dice loss for each batch item, reduced over the batch.

    The weights are treated as constants when differentiating. Pass
    ``weights`` explicitly to evaluate the loss with frozen weights.
    Inputs of rank 4 are split per item along the first axis; lower ranks
    are one item.
    """
    p, y = _validate(p, y)
    if weights is None:
        weights = adaptive_weights(p, y, mode, gamma)
    weights = np.asarray(weights, dtype=np.float64)
    items = p.shape[0] if p.ndim == 4 else 1
    pi = p.reshape(items, -1)
    yi = y.reshape(items, -1)
    wi = weights.reshape(items, -1)
    total = 0.0
    grad = np.empty_like(pi)
    for n in range(items):
        inter, denom = _dice_terms(pi[n], yi[n], wi[n], eps)
        numer = 2 * inter + eps
        total += 1 - numer / denom
        # d/dp_i of -(numer/denom), weights frozen
        grad[n] = -(2 * wi[n] * yi[n] * denom - numer * wi[n]) / denom**2
    scale = 1.0 if normalize == "sum" else 1.0 / items
    return total * scale, grad.reshape(p.shape) * scale


def raf(p, y, cfg: RafConfig = RafConfig()) -> LossOutput:
    l_bce, g_bce = bce(p, y, cfg.clamp, cfg.normalize)
    l_focal, g_focal = focal(p, y, cfg.alpha, cfg.gamma, cfg.clamp, cfg.normalize)
    l_dice, g_dice = adaptive_dice(p, y, cfg.adaptive_mode, cfg.gamma, cfg.eps, cfg.normalize)
    total = cfg.lambda_bce * l_bce + cfg.lambda_focal * l_focal + cfg.lambda_dice * l_dice
    grad = cfg.lambda_bce * g_bce + cfg.lambda_focal * g_focal + cfg.lambda_dice * g_dice
    return LossOutput(total, l_bce, l_focal, l_dice, grad)
