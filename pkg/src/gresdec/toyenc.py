"""Small trainable stand-ins for the visual and language backbones."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import Linear, ShapeError, glorot_

STRIDES = (8, 4, 2)


class ConfigError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


@dataclass
class VisualFeatures:
    levels: list[torch.Tensor]          # level i: [..., H_i*W_i, D], coarsest first
    dims: list[tuple[int, int]]


@dataclass
class LanguageFeatures:
    word: torch.Tensor                  # [..., T, D]
    sentence: torch.Tensor              # [..., 1, D]
    query: torch.Tensor                 # [..., T+1, D]

    @property
    def n_tokens(self) -> int:
        return self.query.shape[-2]


def coord_features(h: int, w: int, n_freq: int = 4, dtype=torch.float32) -> torch.Tensor:
    """Fixed sin/cos features of normalized pixel-centre coordinates, [H, W, 4*n_freq]."""
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    feats = []
    for k in range(n_freq):
        f = math.pi * (2 ** k)
        feats += [torch.sin(f * yy), torch.cos(f * yy), torch.sin(f * xx), torch.cos(f * xx)]
    return torch.stack(feats, dim=-1).to(dtype)


class VisualEncoder(nn.Module):
    """Per-cell embedding plus projected coordinate features, average-pooled at
    strides 8/4/2 and projected per level into the joint dimension."""

    def __init__(self, n_cell_ids: int, dim: int, grid_hw: tuple[int, int] = (32, 32),
                 n_freq: int = 4, generator=None, dtype=torch.float32):
        super().__init__()
        h, w = grid_hw
        if h % 8 or w % 8:
            raise ConfigError(f"grid {h}x{w} is not divisible by 8")
        self.grid_hw = (h, w)
        self.dim = dim
        self.embed = nn.Parameter(glorot_(torch.empty(n_cell_ids, dim, dtype=dtype), n_cell_ids, dim, generator))
        self.register_buffer("coords", coord_features(h, w, n_freq, dtype), persistent=False)
        self.pos_proj = Linear(4 * n_freq, dim, bias=False, generator=generator, dtype=dtype)
        self.level_proj = nn.ModuleList(Linear(dim, dim, generator=generator, dtype=dtype) for _ in STRIDES)

    def forward(self, grid: torch.Tensor) -> VisualFeatures:
        return encode_image(grid, self)


def encode_image(grid: torch.Tensor, enc: VisualEncoder) -> VisualFeatures:
    """``grid`` is an integer tensor [H, W] or [B, H, W] of cell ids."""
    grid = torch.as_tensor(grid, dtype=torch.long)
    h, w = grid.shape[-2:]
    if h % 8 or w % 8:
        raise ConfigError(f"grid {h}x{w} is not divisible by 8")
    if (h, w) != enc.grid_hw:
        raise ShapeError(f"encoder built for grid {enc.grid_hw}, got {(h, w)}")
    if grid.min() < 0 or grid.max() >= enc.embed.shape[0]:
        raise VocabularyError("cell id outside the embedding table")
    pix = enc.embed[grid] + enc.pos_proj(enc.coords)          # [..., H, W, D]
    lead = pix.shape[:-3]
    x = pix.reshape(-1, h, w, enc.dim).permute(0, 3, 1, 2)   # [B, D, H, W]
    levels, dims = [], []
    for stride, proj in zip(STRIDES, enc.level_proj):
        p = F.avg_pool2d(x, stride)
        hi, wi = p.shape[-2:]
        flat = p.flatten(2).transpose(1, 2)                   # [B, HiWi, D]
        levels.append(proj(flat).reshape(*lead, hi * wi, enc.dim))
        dims.append((hi, wi))
    return VisualFeatures(levels, dims)


class TextEncoder(nn.Module):
    """Embedding lookup for word features; mean pooling plus a Linear for the
    sentence feature."""

    def __init__(self, vocab_size: int, dim: int, max_len: int = 20, generator=None, dtype=torch.float32):
        super().__init__()
        self.vocab_size, self.dim, self.max_len = vocab_size, dim, max_len
        self.embed = nn.Parameter(glorot_(torch.empty(vocab_size, dim, dtype=dtype), vocab_size, dim, generator))
        self.sent_proj = Linear(dim, dim, generator=generator, dtype=dtype)

    def forward(self, tokens) -> LanguageFeatures:
        return encode_text(tokens, self)


def encode_text(tokens, enc: TextEncoder) -> LanguageFeatures:
    """``tokens`` is a list of ids, or a long tensor [T] / [B, T]."""
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    t = tokens.shape[-1] if tokens.dim() else 0
    if t == 0:
        raise ValueError("expression has no tokens")
    if t > enc.max_len:
        raise ValueError(f"expression length {t} exceeds max_len {enc.max_len}")
    if tokens.min() < 0 or tokens.max() >= enc.vocab_size:
        raise VocabularyError(f"token id outside vocabulary of size {enc.vocab_size}")
    word = enc.embed[tokens]
    sentence = enc.sent_proj(word.mean(dim=-2, keepdim=True))
    return LanguageFeatures(word, sentence, torch.cat([word, sentence], dim=-2))
