"""Masked focal loss, soft dice loss, and their weighted combination.

Both losses consume channel-normalized probabilities of shape [N,K,H,W]
together with uint8 label maps of shape [N,H,W] (255 marks invalid cells)
and an optional boolean validity mask. Invalid cells contribute nothing
to either loss. Each loss registers a single differentiable node on the
active tape with an analytic backward pass w.r.t. the probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad

INVALID_LABEL = 255
PROB_CLAMP = 1e-7
# classes with no ground-truth cells and at most this much predicted mass
# are left out of the dice mean (correctly absent, no penalty)
DICE_PRESENCE_MASS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    epsilon: float = 1.0
    lambda_focal: float = 1.0
    lambda_dice: float = 1.0

    def validate(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.lambda_focal < 0 or self.lambda_dice < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda_focal == 0 and self.lambda_dice == 0:
            raise ValueError("at least one loss weight must be positive")


class LossComponents(NamedTuple):
    focal: float
    dice: float


def _valid_mask(probs: ad.Tensor, labels: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    n, k, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    valid = labels != INVALID_LABEL
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    bad = valid & (labels >= k)
    if bad.any():
        raise ValueError(f"label {int(labels[bad].max())} out of range for {k} classes")
    if not valid.any():
        raise ValueError("all cells are masked; loss is undefined")
    return valid


def focal_loss(probs: ad.Tensor, labels: np.ndarray, mask: Optional[np.ndarray] = None,
               config: LossConfig = LossConfig()) -> ad.Tensor:
    """Mean over valid cells of alpha * (1 - p_true)**gamma * (-log p_true)."""
    config.validate()
    valid = _valid_mask(probs, labels, mask)
    p = probs.data
    n_valid = int(valid.sum())
    alpha, gamma = config.alpha, config.gamma

    lab = np.where(valid, labels, 0).astype(np.int64)
    pt = np.take_along_axis(p, lab[:, None], axis=1)[:, 0]
    in_range = (pt > PROB_CLAMP) & (pt < 1.0 - PROB_CLAMP)
    ptc = np.clip(pt, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one_m = 1.0 - ptc
    log_p = np.log(ptc)
    term = alpha * one_m ** gamma * (-log_p)
    out = np.asarray(term[valid].sum() / n_valid, dtype=p.dtype)

    def bwd(g):
        dterm = alpha * (gamma * one_m ** (gamma - 1.0) * log_p - one_m ** gamma / ptc)
        dterm = np.where(valid & in_range, dterm, 0.0) * (float(g) / n_valid)
        dp = np.zeros_like(p)
        np.put_along_axis(dp, lab[:, None], dterm[:, None].astype(p.dtype), axis=1)
        return (dp,)

    return ad.record("focal_loss", (probs,), out, bwd)


def dice_loss(probs: ad.Tensor, labels: np.ndarray, mask: Optional[np.ndarray] = None,
              config: LossConfig = LossConfig()) -> ad.Tensor:
    """One minus the mean per-class soft overlap coefficient.

    Overlap sums run over the valid cells of the whole batch. The mean is
    taken over classes present in the batch: those with ground-truth cells
    or with predicted mass above DICE_PRESENCE_MASS.
    """
    config.validate()
    valid = _valid_mask(probs, labels, mask)
    p = probs.data
    n, k, h, w = p.shape
    eps = config.epsilon

    vm = valid[:, None]
    onehot = np.zeros_like(p)
    lab = np.where(valid, labels, 0).astype(np.int64)
    np.put_along_axis(onehot, lab[:, None], np.asarray(valid[:, None], dtype=p.dtype), axis=1)

    pm = np.where(vm, p, 0.0)
    inter = (pm * onehot).sum(axis=(0, 2, 3))
    psum = pm.sum(axis=(0, 2, 3))
    ysum = onehot.sum(axis=(0, 2, 3))
    present = (ysum > 0) | (psum > DICE_PRESENCE_MASS)
    num = 2.0 * inter + eps
    den = psum + ysum + eps
    dice = num / den
    n_present = int(present.sum())
    out = np.asarray(1.0 - dice[present].sum() / n_present, dtype=p.dtype)

    def bwd(g):
        # d dice_k / dp = (2*y*den - num) / den^2 at valid cells
        scale = -float(g) / n_present
        coef2 = np.where(present, 2.0 / den, 0.0).astype(p.dtype)
        coef1 = np.where(present, num / (den * den), 0.0).astype(p.dtype)
        dp = (onehot * coef2[None, :, None, None] - coef1[None, :, None, None]) * scale
        return (np.where(vm, dp, 0.0),)

    return ad.record("dice_loss", (probs,), out, bwd)


def combined_loss(probs: ad.Tensor, labels: np.ndarray, mask: Optional[np.ndarray] = None,
                  config: LossConfig = LossConfig()) -> tuple[ad.Tensor, LossComponents]:
    """lambda_focal * focal + lambda_dice * dice, plus both raw components."""
    config.validate()
    fl = focal_loss(probs, labels, mask, config)
    dl = dice_loss(probs, labels, mask, config)
    components = LossComponents(float(fl.data), float(dl.data))
    # degenerate weights reduce to the surviving term exactly
    if config.lambda_dice == 0.0:
        total = fl if config.lambda_focal == 1.0 else ad.mul_scalar(fl, config.lambda_focal)
    elif config.lambda_focal == 0.0:
        total = dl if config.lambda_dice == 1.0 else ad.mul_scalar(dl, config.lambda_dice)
    else:
        total = ad.add(ad.mul_scalar(fl, config.lambda_focal),
                       ad.mul_scalar(dl, config.lambda_dice))
    return total, components
