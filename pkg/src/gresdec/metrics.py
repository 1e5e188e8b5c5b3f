"""GRES / RES evaluation metrics over per-sample records.

Conventions:
  * a sample is "predicted empty" when the existence head says no target; the
    mask is then treated as all background.
  * gIoU scores empty-target samples 1 when rejected and 0 otherwise.
  * cIoU sums intersections and unions over the whole set, so 0/0 samples
    drop out of both sums.
  * Pr@t, mIoU only look at samples whose ground truth is non-empty.
  * rIoU scores a negative sentence 1 if rejected else 0 (``negative_score``
    hook), then averages with positive IoUs at equal weight.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .aoc import c_acc as _c_acc


class UndefinedMetric(ValueError):
    pass


@dataclass
class EvalRecord:
    iou: float
    pred_empty: bool
    gt_empty: bool
    intersection: int = 0
    union: int = 0
    pred_counts: list[float] = field(default_factory=list)
    gt_counts: list[int] = field(default_factory=list)
    polarity: str = "positive"
    image_id: int = 0


def sample_iou(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def make_record(pred_mask, gt_mask, pred_empty: bool, *, pred_counts=(), gt_counts=(),
                polarity: str | None = None, image_id: int = 0) -> EvalRecord:
    gt = np.asarray(gt_mask, dtype=bool)
    pred = np.zeros_like(gt) if pred_empty else np.asarray(pred_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    gt_empty = not gt.any()
    return EvalRecord(
        iou=sample_iou(pred, gt),
        pred_empty=bool(pred_empty),
        gt_empty=gt_empty,
        intersection=int(np.logical_and(pred, gt).sum()),
        union=int(np.logical_or(pred, gt).sum()),
        pred_counts=[float(c) for c in pred_counts],
        gt_counts=[int(c) for c in gt_counts],
        polarity=polarity or ("negative" if gt_empty else "positive"),
        image_id=image_id,
    )


def _nonempty(records):
    return [r for r in records if not r.gt_empty]


def giou(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise UndefinedMetric("gIoU of an empty record list")
    total = 0.0
    for r in records:
        if r.gt_empty:
            total += 1.0 if r.pred_empty else 0.0
        else:
            total += 0.0 if r.pred_empty else r.iou
    return total / len(records)


def ciou(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise UndefinedMetric("cIoU of an empty record list")
    inter = sum(r.intersection for r in records)
    union = sum(r.union for r in records)
    if union == 0:
        raise UndefinedMetric("cIoU: total union is zero")
    return inter / union


oiou = ciou


def n_acc(records: Sequence[EvalRecord]) -> float:
    empties = [r for r in records if r.gt_empty]
    if not empties:
        raise UndefinedMetric("N-acc needs at least one empty-target sample")
    return sum(r.pred_empty for r in empties) / len(empties)


acc = n_acc


def pr_at(records: Sequence[EvalRecord], t: float) -> float:
    eligible = _nonempty(records)
    if not eligible:
        raise UndefinedMetric("Pr@t needs at least one non-empty sample")
    return sum((0.0 if r.pred_empty else r.iou) >= t for r in eligible) / len(eligible)


def miou(records: Sequence[EvalRecord]) -> float:
    eligible = _nonempty(records)
    if not eligible:
        raise UndefinedMetric("mIoU needs at least one non-empty sample")
    return sum(0.0 if r.pred_empty else r.iou for r in eligible) / len(eligible)


def _binary_rejection(r: EvalRecord) -> float:
    return 1.0 if r.pred_empty else 0.0


def riou(records: Sequence[EvalRecord],
         negative_score: Callable[[EvalRecord], float] = _binary_rejection) -> float:
    if not records:
        raise UndefinedMetric("rIoU of an empty record list")
    total = 0.0
    for r in records:
        if r.polarity == "negative":
            total += negative_score(r)
        else:
            total += 0.0 if r.pred_empty else r.iou
    return total / len(records)


def mrr(records: Sequence[EvalRecord]) -> float:
    groups = defaultdict(list)
    for r in records:
        if r.gt_empty:
            groups[r.image_id].append(r.pred_empty)
    if not groups:
        raise UndefinedMetric("mRR needs at least one empty-target sample")
    rates = [sum(v) / len(v) for _, v in sorted(groups.items())]
    return sum(rates) / len(rates)


def c_acc(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise UndefinedMetric("C-acc of an empty record list")
    return _c_acc([r.pred_counts for r in records], [r.gt_counts for r in records])


REPORT_KEYS = ("giou", "ciou", "n_acc", "acc", "miou", "oiou", "riou", "mrr", "pr@0.70", "c_acc")


@dataclass
class MetricReport:
    """Undefined metrics (e.g. N-acc on a set without empty targets) are None."""
    giou: float | None = None
    ciou: float | None = None
    n_acc: float | None = None
    miou: float | None = None
    riou: float | None = None
    mrr: float | None = None
    c_acc: float | None = None
    pr_at: dict[float, float | None] = field(default_factory=dict)

    @property
    def acc(self):
        return self.n_acc

    @property
    def oiou(self):
        return self.ciou

    def as_dict(self) -> dict:
        d = {"giou": self.giou, "ciou": self.ciou, "n_acc": self.n_acc, "acc": self.acc,
             "miou": self.miou, "oiou": self.oiou, "riou": self.riou, "mrr": self.mrr}
        for t, v in sorted(self.pr_at.items()):
            d[f"pr@{t:.2f}"] = v
        d["c_acc"] = self.c_acc
        return d

    def to_json(self) -> str:
        def fmt(v):
            return "null" if v is None else f"{v:.6f}"
        body = ",\n".join(f"  {json.dumps(k)}: {fmt(v)}" for k, v in self.as_dict().items())
        return "{\n" + body + "\n}\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        d = json.loads(text)
        pr = {float(k[3:]): v for k, v in d.items() if k.startswith("pr@")}
        return cls(giou=d["giou"], ciou=d["ciou"], n_acc=d["n_acc"], miou=d["miou"], riou=d["riou"],
                   mrr=d["mrr"], c_acc=d["c_acc"], pr_at=pr)


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


def report(records: Sequence[EvalRecord], thresholds: Sequence[float] = (0.7,)) -> MetricReport:
    has_counts = bool(records) and all(r.pred_counts and r.gt_counts for r in records)
    return MetricReport(
        giou=_safe(giou, records),
        ciou=_safe(ciou, records),
        n_acc=_safe(n_acc, records),
        miou=_safe(miou, records),
        riou=_safe(riou, records),
        mrr=_safe(mrr, records),
        c_acc=_safe(c_acc, records) if has_counts else None,
        pr_at={float(t): _safe(pr_at, records, t) for t in thresholds},
    )
