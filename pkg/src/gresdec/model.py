"""Full decoder stack: toy encoders -> cascaded SDMs -> DHA -> AOC."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .aoc import AdaptiveObjectCounting, CountPrediction, existence_loss, smooth_l1
from .config import Config, ModelConfig
from .dha import DynamicHierarchicalAggregation, MaskLogits
from .losses import LossWeights, mask_loss, total_loss
from .numerics import make_generator
from .sdm import LevelBundle, SemanticDecodingModule
from .toyenc import STRIDES, TextEncoder, VisualEncoder

N_LEVELS = len(STRIDES)
DTYPES = {"float32": torch.float32, "float64": torch.float64}


def block_levels(sdm_layers: int) -> list[tuple[int, bool]]:
    """(pyramid level, refines query) for every SDM block, in execution order.

    ``sdm_layers`` counts query-refining blocks; they cycle coarse-to-fine
    over the pyramid. With fewer than three, the untouched levels still get
    a map-only block so aggregation always sees three levels.
    """
    blocks = [(k % N_LEVELS, True) for k in range(sdm_layers)]
    blocks += [(lvl, False) for lvl in range(sdm_layers, N_LEVELS)]
    return blocks


@dataclass
class ModelOutput:
    mask: MaskLogits
    counts: CountPrediction
    bundles: list[LevelBundle]


class GresModel(nn.Module):
    def __init__(self, cfg: ModelConfig, *, n_categories: int, n_cell_ids: int, vocab_size: int,
                 grid_hw=(32, 32), seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.grid_hw = tuple(grid_hw)
        self.n_tokens = cfg.max_len + 1
        g = make_generator(seed)
        kw = dict(generator=g, dtype=dtype)
        self.visual = VisualEncoder(n_cell_ids, cfg.dim, self.grid_hw, **kw)
        self.text = TextEncoder(vocab_size, cfg.dim, cfg.max_len, **kw)
        h, w = self.grid_hw
        self.level_hw = [(h // s, w // s) for s in STRIDES]
        self.blocks_spec = block_levels(cfg.sdm_layers)
        self.sdm = nn.ModuleList(
            SemanticDecodingModule(cfg.dim, self.level_hw[lvl][0] * self.level_hw[lvl][1], cfg.n_heads,
                                   cfg.react, cfg.mha_residual, refine, cfg.activation, **kw)
            for lvl, refine in self.blocks_spec)
        self.dha = DynamicHierarchicalAggregation(
            cfg.dim, self.n_tokens, N_LEVELS, cfg.reduction, cfg.upsample_mode, cfg.kernel,
            intra=cfg.intra, inter=cfg.inter, hierarchical=cfg.hsd, activation=cfg.activation, **kw)
        self.aoc = AdaptiveObjectCounting(cfg.dim, n_categories, N_LEVELS, cfg.token_reduce,
                                          cfg.aoc, activation=cfg.activation, **kw)

    @property
    def n_categories(self) -> int:
        return self.aoc.n_categories

    def pad_tokens(self, tokens: list[list[int]]) -> torch.Tensor:
        return pad_tokens(tokens, self.cfg.max_len)

    @torch.no_grad()
    def predict_batch(self, grid: torch.Tensor, tokens: torch.Tensor, indices=None) -> dict:
        out = self(grid, tokens)
        masks, empty, counts = predict(out, self.cfg.aoc)
        n = grid.shape[0]
        return {"masks": masks, "empty": empty, "counts": counts,
                "alphas": torch.stack([a.expand(n) for a in out.mask.alphas], dim=1),
                "token_gates": torch.stack(out.mask.token_gates, dim=1)}

    def forward(self, grid: torch.Tensor, tokens: torch.Tensor, alphas=None) -> ModelOutput:
        vis = self.visual(grid)
        lang = self.text(tokens)
        q = lang.query
        latest: list[LevelBundle | None] = [None] * N_LEVELS
        for (lvl, _), block in zip(self.blocks_spec, self.sdm):
            bundle = block(q, vis.levels[lvl], lang.query)
            latest[lvl] = bundle
            q = bundle.query
        mask = self.dha(latest, vis.dims, self.grid_hw, alphas=alphas, per_level=self.cfg.deep_supervision)
        counts = self.aoc([b.query for b in latest])
        return ModelOutput(mask, counts, latest)


def pad_tokens(tokens: list[list[int]], max_len: int = 20) -> torch.Tensor:
    """Right-pad with id 0 to ``max_len``; the token axis is then fixed at N = max_len + 1."""
    out = torch.zeros(len(tokens), max_len, dtype=torch.long)
    for i, t in enumerate(tokens):
        if not 1 <= len(t) <= max_len:
            raise ValueError(f"expression length {len(t)} outside 1..{max_len}")
        out[i, :len(t)] = torch.as_tensor(t)
    return out


def build_model(cfg: Config, meta: dict) -> GresModel:
    return GresModel(cfg.model, n_categories=int(meta["C"]), n_cell_ids=int(meta["n_cell_ids"]),
                     vocab_size=int(meta["vocab_size"]), grid_hw=tuple(meta["grid_hw"]),
                     seed=cfg.seed, dtype=DTYPES[cfg.dtype])


def compute_losses(out: ModelOutput, gt_mask: torch.Tensor, gt_counts: torch.Tensor, gt_exist: torch.Tensor,
                   cfg: Config) -> dict[str, torch.Tensor]:
    mcfg = cfg.model
    w = LossWeights(cfg.loss.lambda_mask, cfg.loss.lambda_count, cfg.loss.lambda_exist)
    mask_l = mask_loss(out.mask.logits, gt_mask)
    if mcfg.deep_supervision:
        mask_l = mask_l + sum(mask_loss(l, gt_mask) for l in out.mask.level_logits) / len(out.mask.level_logits)
    count_l = smooth_l1(out.counts.pred, gt_counts.to(out.counts.pred.dtype))
    exist_l = existence_loss(out.counts.exist_logits, gt_exist)
    if mcfg.aoc == "off":
        w = LossWeights(w.lambda_mask, 0.0, 0.0)
    elif mcfg.aoc == "binary_only":
        w = LossWeights(w.lambda_mask, 0.0, w.lambda_exist)
    total = total_loss(mask_l, count_l, exist_l, w)
    return {"loss": total, "mask_l": mask_l, "count_l": count_l, "exist_l": exist_l}


@torch.no_grad()
def predict(out: ModelOutput, aoc_mode: str = "full"):
    """(binary masks [B,H,W], predicted-empty flags [B], raw counts [B,C])."""
    masks = out.mask.logits.argmax(dim=-1)
    if aoc_mode == "off":
        empty = ~masks.flatten(1).any(dim=1)
    else:
        empty = out.counts.exist_logits.argmax(dim=-1) == 0
    masks = masks * (~empty)[:, None, None]
    return masks, empty, out.counts.pred
