"""Mask loss and the weighted total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .numerics import NumericError, ShapeError


@dataclass
class LossWeights:
    lambda_mask: float = 2.0
    lambda_count: float = 0.1
    lambda_exist: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0, got {v}")


def mask_loss(logits: torch.Tensor, gt_mask) -> torch.Tensor:
    """Pixel-mean two-class cross entropy. ``logits`` is [..., H, W, 2]."""
    gt = torch.as_tensor(gt_mask)
    if logits.shape[:-1] != gt.shape or logits.shape[-1] != 2:
        raise ShapeError(f"logits {tuple(logits.shape)} do not match mask {tuple(gt.shape)}")
    if ((gt != 0) & (gt != 1)).any():
        raise ValueError("ground-truth mask must be binary")
    return F.cross_entropy(logits.reshape(-1, 2), gt.reshape(-1).long())


def total_loss(mask_l, count_l, exist_l, w: LossWeights = LossWeights()):
    for name, v in (("mask", mask_l), ("count", count_l), ("exist", exist_l)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NumericError(f"{name} loss is not finite")
    return w.lambda_mask * mask_l + w.lambda_count * count_l + w.lambda_exist * exist_l
