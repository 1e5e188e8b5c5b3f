"""Semantic decoding module: bidirectional cross-modal calibration producing a
per-token semantic map, then query refinement from that map."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import Linear, Mlp, ShapeError, matmul, mlp_forward, softmax_rows

REACT_MODES = ("concat_linear", "add", "cross_attn")


@dataclass
class LevelBundle:
    semantic_map: torch.Tensor   # [..., N, HiWi]
    query: torch.Tensor          # [..., N, D]


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, generator=None, dtype=torch.float32):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.dim, self.n_heads = dim, n_heads
        self.q = Linear(dim, dim, generator=generator, dtype=dtype)
        self.k = Linear(dim, dim, generator=generator, dtype=dtype)
        self.v = Linear(dim, dim, generator=generator, dtype=dtype)
        self.out = Linear(dim, dim, generator=generator, dtype=dtype)

    def _split(self, x):
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.n_heads, self.dim // self.n_heads).transpose(-3, -2)

    def forward(self, query, key, value):
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        scale = 1.0 / math.sqrt(self.dim // self.n_heads)
        attn = softmax_rows(matmul(q, k.transpose(-1, -2)) * scale)
        ctx = matmul(attn, v).transpose(-3, -2)
        return self.out(ctx.reshape(*ctx.shape[:-2], self.dim))


class SemanticDecodingModule(nn.Module):
    """One decoding block attached to a pyramid level with ``hw`` positions.

    With ``refine=False`` the block only emits its semantic map and passes the
    query through unchanged.
    """

    def __init__(self, dim: int, hw: int, n_heads: int = 4, react: str = "concat_linear",
                 mha_residual: bool = True, refine: bool = True, activation: str = "relu",
                 generator=None, dtype=torch.float32):
        super().__init__()
        if react not in REACT_MODES:
            raise ValueError(f"unknown react mode {react!r}")
        self.dim, self.hw = dim, hw
        self.react_mode, self.mha_residual, self.refine = react, mha_residual, refine
        kw = dict(generator=generator, dtype=dtype)
        self.wk_v = Linear(dim, dim, bias=False, **kw)
        self.wv_v = Linear(dim, dim, bias=False, **kw)
        self.wk_l = Linear(dim, dim, bias=False, **kw)
        self.wv_l = Linear(dim, dim, bias=False, **kw)
        if refine:
            self.proj_s = Mlp([hw, dim, dim], activation, **kw)
            self.mha = MultiHeadAttention(dim, n_heads, **kw)
            if react == "concat_linear":
                self.react = Linear(2 * dim, dim, **kw)
            elif react == "cross_attn":
                self.react = MultiHeadAttention(dim, n_heads, **kw)

    def coarse_map(self, lang: torch.Tensor, vis: torch.Tensor) -> torch.Tensor:
        if lang.shape[-1] != self.dim or vis.shape[-1] != self.dim:
            raise ShapeError("coarse_map: language and visual features must share the joint dim")
        return matmul(self.wk_l(lang), self.wk_v(vis).transpose(-1, -2)) / math.sqrt(self.dim)

    def fine_map(self, lang: torch.Tensor, vis: torch.Tensor):
        """Returns (semantic map [N, HW], language-attends-vision [N, D],
        vision-attends-language [HW, D])."""
        a = self.coarse_map(lang, vis)
        f_lv = matmul(softmax_rows(a), self.wv_v(vis))
        f_vl = matmul(softmax_rows(a.transpose(-1, -2)), self.wv_l(lang))
        s = matmul(f_lv, f_vl.transpose(-1, -2))
        return s, f_lv, f_vl

    def refine_query(self, q_lang: torch.Tensor, s: torch.Tensor, lang_orig: torch.Tensor) -> torch.Tensor:
        if s.shape[-1] != self.hw:
            raise ShapeError(f"semantic map has {s.shape[-1]} positions, block expects {self.hw}")
        if not self.refine:
            return q_lang
        q_s = mlp_forward(self.proj_s, s)
        q2 = self.mha(q_lang, q_s, q_s)
        if self.mha_residual:
            q2 = q2 + q_lang
        if self.react_mode == "concat_linear":
            return self.react(torch.cat([q2, lang_orig], dim=-1))
        if self.react_mode == "add":
            return q2 + lang_orig
        return q2 + self.react(q2, lang_orig, lang_orig)

    def forward(self, q_lang: torch.Tensor, vis: torch.Tensor, lang_orig: torch.Tensor) -> LevelBundle:
        return run_level(q_lang, vis, lang_orig, self)


def run_level(q_lang: torch.Tensor, vis: torch.Tensor, lang_orig: torch.Tensor,
              block: SemanticDecodingModule) -> LevelBundle:
    """The chained query drives both the cross-modal map and the refinement."""
    if q_lang.shape != lang_orig.shape:
        raise ShapeError("query and original language features must have the same shape")
    s, _, _ = block.fine_map(q_lang, vis)
    return LevelBundle(s, block.refine_query(q_lang, s, lang_orig))
