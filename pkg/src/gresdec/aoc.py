"""Adaptive object counting: per-level counting vectors, fused count
prediction, smooth-L1 count loss and the detached existence head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import Mlp, ShapeError, mlp_forward

TOKEN_REDUCE = ("sum", "mean")
AOC_MODES = ("full", "off", "binary_only")


@dataclass
class CountPrediction:
    per_level: list[torch.Tensor]   # 3 x [..., N, C]
    fused: torch.Tensor             # [..., N, C]
    pred: torch.Tensor              # [..., C]
    exist_logits: torch.Tensor      # [..., 2]


class AdaptiveObjectCounting(nn.Module):
    """``mode="binary_only"`` swaps the existence head's input from the detached
    count prediction to the token-mean of the last refined query (not detached)."""

    def __init__(self, dim: int, n_categories: int, n_levels: int = 3, token_reduce: str = "sum",
                 mode: str = "full", exist_hidden: int = 16, activation: str = "relu",
                 generator=None, dtype=torch.float32):
        super().__init__()
        if n_categories < 1:
            raise ValueError("need at least one category")
        if token_reduce not in TOKEN_REDUCE:
            raise ValueError(f"unknown token reduction {token_reduce!r}")
        if mode not in AOC_MODES:
            raise ValueError(f"unknown AOC mode {mode!r}")
        self.n_categories, self.token_reduce, self.mode = n_categories, token_reduce, mode
        kw = dict(generator=generator, dtype=dtype)
        self.count_mlp = nn.ModuleList(Mlp([dim, dim, n_categories], activation, **kw) for _ in range(n_levels))
        exist_in = dim if mode == "binary_only" else n_categories
        self.exist_head = Mlp([exist_in, exist_hidden, 2], activation, **kw)

    def forward(self, queries: list[torch.Tensor]) -> CountPrediction:
        return count_forward(queries, self)


def count_forward(queries: list[torch.Tensor], p: AdaptiveObjectCounting) -> CountPrediction:
    if len(queries) != len(p.count_mlp):
        raise ShapeError(f"expected {len(p.count_mlp)} level queries, got {len(queries)}")
    if len({tuple(q.shape) for q in queries}) != 1:
        raise ShapeError("level queries disagree in shape")
    per_level = [mlp_forward(m, q) for m, q in zip(p.count_mlp, queries)]
    fused = torch.stack(per_level).mean(dim=0)
    pred = fused.sum(dim=-2) if p.token_reduce == "sum" else fused.mean(dim=-2)
    if p.mode == "binary_only":
        exist = mlp_forward(p.exist_head, queries[-1].mean(dim=-2))
    else:
        exist = mlp_forward(p.exist_head, pred.detach())
    return CountPrediction(per_level, fused, pred, exist)


def smooth_l1(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Piecewise 0.5x^2 (|x|<1) / |x|-0.5, averaged over categories (and batch)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"count shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    x = pred - gt
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5).mean()


def existence_loss(exist_logits: torch.Tensor, p_gt) -> torch.Tensor:
    p_gt = torch.as_tensor(p_gt, dtype=torch.long)
    if ((p_gt != 0) & (p_gt != 1)).any():
        raise ValueError("existence label must be 0 or 1")
    logits = exist_logits.reshape(-1, 2)
    return F.cross_entropy(logits, p_gt.reshape(-1))


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def c_acc(pred_counts, gt_counts) -> float:
    """Fraction of samples whose rounded per-category counts all match."""
    pred = torch.as_tensor(pred_counts, dtype=torch.float64)
    gt = torch.as_tensor(gt_counts, dtype=torch.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"count tables differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape[0] == 0:
        raise ValueError("no samples")
    hit = (round_half_away(pred) == gt).all(dim=-1)
    return hit.double().mean().item()

