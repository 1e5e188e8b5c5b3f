"""Training, evaluation and ablation drivers."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import metrics
from .aoc import round_half_away
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .model import DTYPES, GresModel, build_model, compute_losses
from .synthgres import GresDataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def configure_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


@dataclass
class Tensors:
    grid: torch.Tensor
    tokens: torch.Tensor
    mask: torch.Tensor
    counts: torch.Tensor
    exist: torch.Tensor

    def take(self, idx):
        return Tensors(*(t[idx] for t in (self.grid, self.tokens, self.mask, self.counts, self.exist)))


def dataset_tensors(ds: GresDataset, model: GresModel) -> Tensors:
    s = ds.samples
    return Tensors(
        torch.as_tensor(np.stack([x.grid for x in s])),
        model.pad_tokens([x.tokens for x in s]),
        torch.as_tensor(np.stack([x.gt_mask for x in s]).astype(np.int64)),
        torch.tensor([x.gt_counts for x in s], dtype=torch.float64),
        torch.tensor([x.gt_exist for x in s], dtype=torch.long),
    )


def check_compatible(meta: dict, ds: GresDataset) -> None:
    for key in ("C", "grid_hw", "n_cell_ids", "vocab_size"):
        if meta.get(key) != ds.meta.get(key):
            raise ValueError(f"dataset/model mismatch on {key}: {ds.meta.get(key)} vs {meta.get(key)}")


def lr_at(cfg: Config, step: int) -> float:
    if cfg.optim.schedule == "constant" or cfg.optim.steps == 0:
        return cfg.optim.lr
    return cfg.optim.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.optim.steps))


def batch_order(n: int, batch: int, steps: int, seed: int):
    """Yields index tensors; each epoch is a fresh seeded permutation."""
    g = torch.Generator().manual_seed(seed + 0x5EED)
    perm, pos = torch.randperm(n, generator=g), 0
    for _ in range(steps):
        if pos + batch > n:
            perm, pos = torch.randperm(n, generator=g), 0
        yield perm[pos:pos + min(batch, n)]
        pos += batch


def train(cfg: Config, ds: GresDataset, out_dir=None) -> tuple[GresModel, list[dict]]:
    """Runs ``cfg.optim.steps`` AdamW steps; optionally writes
    ``checkpoint.bin`` and ``train_log.jsonl`` under ``out_dir``."""
    configure_determinism()
    model = build_model(cfg, ds.meta)
    data = dataset_tensors(ds, model)
    o = cfg.optim
    opt = torch.optim.AdamW(model.parameters(), lr=o.lr, betas=o.betas, eps=o.eps, weight_decay=o.weight_decay)
    records = []
    model.train()
    for step, idx in enumerate(batch_order(len(ds), o.batch, o.steps, cfg.seed)):
        lr = lr_at(cfg, step)
        for group in opt.param_groups:
            group["lr"] = lr
        b = data.take(idx)
        out = model(b.grid, b.tokens)
        losses = compute_losses(out, b.mask, b.counts, b.exist, cfg)
        if not torch.isfinite(losses["loss"]):
            raise TrainingError(f"non-finite loss at step {step}")
        opt.zero_grad(set_to_none=True)
        losses["loss"].backward()
        opt.step()
        rec = {"step": step, **{k: float(v.detach()) for k, v in losses.items()}, "lr": lr}
        records.append(rec)
        if step % 200 == 0:
            log.info("step %d loss %.4f mask %.4f count %.4f exist %.4f", step, rec["loss"],
                     rec["mask_l"], rec["count_l"], rec["exist_l"])
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "train_log.jsonl", "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
        save_model(out_dir / "checkpoint.bin", model, cfg, ds.meta)
    return model, records


def model_meta(meta: dict) -> dict:
    return {k: meta[k] for k in ("C", "grid_hw", "n_cell_ids", "vocab_size")}


def save_model(path, model: GresModel, cfg: Config, meta: dict) -> Path:
    return save_checkpoint(path, model.state_dict(), cfg.to_dict(), model_meta(meta))


def load_model(path) -> tuple[GresModel, Config, dict]:
    state, cfg_d, meta = load_checkpoint(path)
    cfg = Config.from_dict(cfg_d)
    model = build_model(cfg, meta)
    dtype = DTYPES[cfg.dtype]
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    return model, cfg, meta


@torch.no_grad()
def evaluate(model, ds: GresDataset, batch: int = 64) -> tuple[metrics.MetricReport, list[dict]]:
    """Runs inference over ``ds``; returns the report and a per-sample dump.

    ``model`` is a :class:`GresModel` or any object with ``n_categories``,
    ``pad_tokens`` and ``predict_batch(grid, tokens, indices)``.
    """
    if model.n_categories != ds.n_categories:
        raise ValueError(f"model counts {model.n_categories} categories, dataset has {ds.n_categories}")
    if isinstance(model, torch.nn.Module):
        model.eval()
    data = dataset_tensors(ds, model)
    records, dump = [], []
    for start in range(0, len(ds), batch):
        idx = torch.arange(start, min(start + batch, len(ds)))
        b = data.take(idx)
        p = model.predict_batch(b.grid, b.tokens, idx)
        for j, i in enumerate(idx.tolist()):
            s = ds.samples[i]
            counts = p["counts"][j]
            r = metrics.make_record(p["masks"][j].numpy(), s.gt_mask, bool(p["empty"][j]),
                                    pred_counts=counts.tolist(), gt_counts=s.gt_counts,
                                    polarity=s.polarity, image_id=s.image_id)
            records.append(r)
            dump.append({
                "index": i, "image_id": s.image_id, "text": s.text, "scenario": s.scenario,
                "pred_empty": r.pred_empty, "gt_empty": r.gt_empty, "iou": r.iou,
                "intersection": r.intersection, "union": r.union,
                "pred_counts": [float(c) for c in counts.tolist()],
                "pred_counts_rounded": [int(c) for c in round_half_away(counts.double()).tolist()],
                "gt_counts": list(s.gt_counts),
                "alphas": [float(a) for a in p["alphas"][j].tolist()],
                "token_gates": [[float(x) for x in g] for g in p["token_gates"][j].tolist()],
            })
    return metrics.report(records), dump


def records_from_dump(dump: list[dict]) -> list[metrics.EvalRecord]:
    """Rebuild metric records from an evaluation dump (metrics-only mode)."""
    return [metrics.EvalRecord(iou=d["iou"], pred_empty=d["pred_empty"], gt_empty=d["gt_empty"],
                               intersection=d["intersection"], union=d["union"],
                               pred_counts=d["pred_counts"], gt_counts=d["gt_counts"],
                               polarity="negative" if d["gt_empty"] else "positive",
                               image_id=d["image_id"])
            for d in dump]


# ---------------------------------------------------------------- ablation

AXES = {
    "hsd_off": {"hsd": False},
    "aoc_off": {"aoc": "off"},
    "aoc_binary_only": {"aoc": "binary_only"},
    "intra_off": {"intra": False},
    "inter_off": {"inter": False},
    "deep_supervision_on": {"deep_supervision": True},
    **{f"sdm_layers={k}": {"sdm_layers": k} for k in (1, 2, 3, 4)},
}

FULL_MATRIX = ("hsd_off", "aoc_off", "aoc_binary_only", "intra_off", "inter_off",
               "sdm_layers=1", "sdm_layers=2", "sdm_layers=3", "sdm_layers=4")

_metric = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
ABLATION_SCHEMA = {
    "type": "object",
    "required": ["rows"],
    "properties": {"rows": {"type": "array", "minItems": 1, "items": {
        "type": "object",
        "required": ["variant", "giou", "ciou", "n_acc", "c_acc", "alpha_min", "alpha_max"],
        "properties": {
            "variant": {"type": "string"},
            "giou": _metric, "ciou": _metric, "n_acc": _metric, "c_acc": _metric,
            "alpha_min": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            "alpha_max": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        },
    }}},
}


def ablate(cfg: Config, ds: GresDataset, axes=(), out_dir=None) -> dict:
    """Trains and evaluates the unmodified config ("full") plus one variant per axis."""
    unknown = [a for a in axes if a not in AXES]
    if unknown:
        raise ValueError(f"unknown ablation axis: {', '.join(unknown)}")
    rows = []
    for name in ("full", *axes):
        vcfg = cfg if name == "full" else cfg.replace(model=AXES[name])
        log.info("ablation variant %s", name)
        model, _ = train(vcfg, ds)
        rep, dump = evaluate(model, ds)
        alphas = np.array([d["alphas"] for d in dump])
        rows.append({"variant": name, "giou": rep.giou, "ciou": rep.ciou, "n_acc": rep.n_acc,
                     "c_acc": rep.c_acc, "alpha_min": alphas.min(axis=0).tolist(),
                     "alpha_max": alphas.max(axis=0).tolist()})
    table = {"rows": rows}
    jsonschema.validate(table, ABLATION_SCHEMA)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.json").write_text(json.dumps(table, indent=1) + "\n")
        (out_dir / "ablation.txt").write_text(format_table(table))
    return table


def format_table(table: dict) -> str:
    def f(v):
        return "   -  " if v is None else f"{100 * v:6.2f}"
    width = max(len("variant"), *(len(r["variant"]) for r in table["rows"]))
    lines = [f"{'variant':<{width}}   gIoU    cIoU   N-acc   C-acc"]
    for r in table["rows"]:
        lines.append(f"{r['variant']:<{width}}  {f(r['giou'])}  {f(r['ciou'])}  {f(r['n_acc'])}  {f(r['c_acc'])}")
    return "\n".join(lines) + "\n"
