"""Dynamic hierarchical aggregation: per-token channel attention inside a
level, a sigmoid saliency gate per level, recursive upsample-and-add
aggregation and query-conditioned two-class kernel decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import Linear, Mlp, ShapeError, matmul, mlp_forward, sigmoid
from .sdm import LevelBundle

UPSAMPLE_MODES = ("bilinear", "nearest")
KERNEL_MODES = ("pooled", "per_token")


@dataclass
class MaskLogits:
    logits: torch.Tensor                          # [..., H, W, 2]
    alphas: list[torch.Tensor]                    # 3 x [...]
    token_gates: list[torch.Tensor]               # 3 x [..., N]
    level_logits: list[torch.Tensor] = field(default_factory=list)


def upsample(m: torch.Tensor, hw: tuple[int, int], size: tuple[int, int], mode: str = "bilinear") -> torch.Tensor:
    """Resize flattened maps [..., C, h*w] to [..., C, H*W]."""
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"unknown upsample mode {mode!r}")
    h, w = hw
    if m.shape[-1] != h * w:
        raise ShapeError(f"map has {m.shape[-1]} positions, expected {h}x{w}")
    lead = m.shape[:-1]
    x = m.reshape(-1, lead[-1] if lead else 1, h, w)
    if mode == "bilinear":
        y = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    else:
        y = F.interpolate(x, size=size, mode="nearest")
    return y.reshape(*lead, size[0] * size[1])


class ChannelAttention(nn.Module):
    """Squeeze over positions, excite over the N token maps."""

    def __init__(self, n_tokens: int, reduction: int = 4, generator=None, dtype=torch.float32):
        super().__init__()
        self.n_tokens = n_tokens
        hidden = max(1, math.ceil(n_tokens / reduction))
        self.fc1 = Linear(n_tokens, hidden, generator=generator, dtype=dtype)
        self.fc2 = Linear(hidden, n_tokens, generator=generator, dtype=dtype)

    def weights(self, m: torch.Tensor) -> torch.Tensor:
        if m.shape[-2] != self.n_tokens:
            raise ShapeError(f"expected {self.n_tokens} token maps, got {m.shape[-2]}")
        return sigmoid(self.fc2(F.relu(self.fc1(m.mean(dim=-1)))))

    def forward(self, m: torch.Tensor):
        w = self.weights(m)
        return w.unsqueeze(-1) * m, w


class DynamicHierarchicalAggregation(nn.Module):
    def __init__(self, dim: int, n_tokens: int, n_levels: int = 3, reduction: int = 4,
                 upsample_mode: str = "bilinear", kernel: str = "pooled",
                 intra: bool = True, inter: bool = True, hierarchical: bool = True,
                 activation: str = "relu", generator=None, dtype=torch.float32):
        super().__init__()
        if upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"unknown upsample mode {upsample_mode!r}")
        if kernel not in KERNEL_MODES:
            raise ValueError(f"unknown kernel mode {kernel!r}")
        self.dim, self.n_tokens, self.n_levels = dim, n_tokens, n_levels
        self.upsample_mode, self.kernel = upsample_mode, kernel
        self.intra, self.inter, self.hierarchical = intra, inter, hierarchical
        kw = dict(generator=generator, dtype=dtype)
        self.gate = Linear(dim, 1, **kw)
        self.chan_attn = nn.ModuleList(ChannelAttention(n_tokens, reduction, **kw) for _ in range(n_levels))
        out = 2 * n_tokens if kernel == "pooled" else 2
        self.kernel_head = Mlp([dim, dim, out], activation, **kw)

    def inter_select(self, q: torch.Tensor) -> torch.Tensor:
        """Scalar saliency per level from the token-mean of the refined query."""
        return sigmoid(self.gate(q.mean(dim=-2))).squeeze(-1)

    def intra_select(self, m: torch.Tensor, level: int):
        if not self.intra:
            return m, torch.ones(m.shape[:-1], dtype=m.dtype)
        return self.chan_attn[level](m)

    def kernel_matrix(self, q3: torch.Tensor) -> torch.Tensor:
        if self.kernel == "pooled":
            b = mlp_forward(self.kernel_head, q3.mean(dim=-2))
            return b.reshape(*b.shape[:-1], self.n_tokens, 2)
        return mlp_forward(self.kernel_head, q3)

    def aggregate(self, bundles: list[LevelBundle], dims: list[tuple[int, int]], alphas=None):
        """Returns (aggregated map at the finest level, alphas, token_gates,
        per-level gated maps).

        ``alphas`` overrides the gate (test hook); ``inter=False`` pins every
        alpha to exactly 1.
        """
        if len(bundles) != len(dims):
            raise ShapeError("one (h, w) per level required")
        for (h0, w0), (h1, w1) in zip(dims[:-1], dims[1:]):
            if (h1, w1) != (2 * h0, 2 * w0):
                raise ShapeError(f"levels {h0}x{w0} -> {h1}x{w1} are not an octave apart")
        selected, gates, alist = [], [], []
        for i, b in enumerate(bundles):
            m, w = self.intra_select(b.semantic_map, i)
            selected.append(m)
            gates.append(w)
            if alphas is not None:
                a = torch.as_tensor(alphas[i], dtype=m.dtype).expand(m.shape[:-2])
            elif not self.inter:
                a = torch.ones(m.shape[:-2], dtype=m.dtype)
            else:
                a = self.inter_select(b.query)
            alist.append(a)
        if not self.hierarchical:
            ones = torch.ones_like(alist[-1])
            alist = [torch.zeros_like(a) for a in alist[:-1]] + [ones]
            return selected[-1], alist, gates, selected
        agg = alist[0][..., None, None] * selected[0]
        for i in range(1, len(bundles)):
            agg = upsample(agg, dims[i - 1], dims[i], self.upsample_mode) + alist[i][..., None, None] * selected[i]
        return agg, alist, gates, selected

    def decode_mask(self, m_star: torch.Tensor, q3: torch.Tensor, hw: tuple[int, int],
                    target_hw: tuple[int, int]) -> torch.Tensor:
        """Pixel logits [..., H, W, 2]: aggregated map (transposed) times the
        [N, 2] query kernel, resized to the input grid."""
        h, w = hw
        if h * w > target_hw[0] * target_hw[1]:
            raise ShapeError("aggregated map is larger than the target resolution")
        b = self.kernel_matrix(q3)
        logits = matmul(m_star.transpose(-1, -2), b)                 # [..., hw, 2]
        full = upsample(logits.transpose(-1, -2), hw, target_hw, self.upsample_mode)
        return full.transpose(-1, -2).reshape(*full.shape[:-2], target_hw[0], target_hw[1], 2)

    def forward(self, bundles, dims, target_hw, alphas=None, per_level: bool = False) -> MaskLogits:
        agg, alist, gates, selected = self.aggregate(bundles, dims, alphas)
        q3 = bundles[-1].query
        out = MaskLogits(self.decode_mask(agg, q3, dims[-1], target_hw), alist, gates)
        if per_level:
            out.level_logits = [self.decode_mask(m, q3, d, target_hw) for m, d in zip(selected, dims)]
        return out
