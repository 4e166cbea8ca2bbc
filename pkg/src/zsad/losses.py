"""Training objectives: global BCE, pixel-level focal and Dice, weighted total.

Local losses operate on two-channel softmax maps that have already been
bilinearly upsampled to the mask resolution; the shape check inside each loss
enforces that they are never evaluated at patch-grid resolution.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import ConfigError, DataError

PROB_CLAMP = 1e-7
CHANNEL_SUM_TOL = 1e-4


def global_loss(y: float | Tensor, p: Tensor) -> Tensor:
    """Binary cross-entropy of the image-level anomaly probability."""
    p = torch.clamp(torch.as_tensor(p), PROB_CLAMP, 1 - PROB_CLAMP)
    y = torch.as_tensor(y, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))


def _check_local_inputs(pred: Tensor, mask: Tensor) -> None:
    if pred.ndim != 3 or pred.shape[0] != 2:
        raise DataError(f"expected a (2, H, W) prediction map, got {tuple(pred.shape)}")
    if mask.shape != pred.shape[1:]:
        raise DataError(
            f"prediction {tuple(pred.shape[1:])} and mask {tuple(mask.shape)} resolutions "
            "differ; upsample predictions to the mask resolution before the loss"
        )
    sums = pred.sum(dim=0)
    if (sums - 1).abs().max() > CHANNEL_SUM_TOL:
        raise DataError("prediction channels must sum to 1 per pixel")


def focal_loss(pred: Tensor, mask: Tensor, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of -(1 - p_t)^gamma log(p_t).

    ``pred`` is a (2, H, W) [normal, anomaly] softmax map; ``mask`` is binary.
    gamma=0 reduces to plain cross-entropy. No class weighting.
    """
    if gamma < 0:
        raise ConfigError("focal gamma must be >= 0")
    _check_local_inputs(pred, mask)
    mask = mask.to(pred.dtype)
    p_t = pred[1] * mask + pred[0] * (1 - mask)
    p_t = torch.clamp(p_t, PROB_CLAMP, 1.0)
    return (-(1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(pred: Tensor, mask: Tensor, smooth: float = 1.0, mode: str = "anomaly") -> Tensor:
    """Soft Dice loss; by default on the anomaly channel against the binary mask."""
    _check_local_inputs(pred, mask)
    mask = mask.to(pred.dtype)

    def one_channel(p: Tensor, m: Tensor) -> Tensor:
        inter = (p * m).sum()
        return 1 - (2 * inter + smooth) / (p.sum() + m.sum() + smooth)

    if mode == "anomaly":
        return one_channel(pred[1], mask)
    if mode == "both":
        return (one_channel(pred[1], mask) + one_channel(pred[0], 1 - mask)) / 2
    raise ConfigError(f"dice mode must be 'anomaly' or 'both', got {mode!r}")


def local_loss(pred: Tensor, mask: Tensor, gamma: float = 2.0, dice_smooth: float = 1.0,
               dice_mode: str = "anomaly") -> Tensor:
    """Per-branch pixel loss: focal + Dice on the upsampled two-channel map."""
    return focal_loss(pred, mask, gamma) + dice_loss(pred, mask, dice_smooth, dice_mode)


def total_loss(global_term: Tensor, local_terms: list[Tensor], lam: float = 1.0) -> Tensor:
    """L_total = global + lambda * sum of per-branch local losses."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    total = torch.as_tensor(global_term)
    for term in local_terms:
        total = total + lam * term
    return total
