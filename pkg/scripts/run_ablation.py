"""Train and evaluate every ablation variant on a shared 200-sample set.

    python scripts/run_ablation.py --out runs/ablation

Writes ablation.json / ablation.txt and prints the table next to the
directions one would expect from the full-scale system. Directions are
reported, never asserted.
"""
import argparse
import json
import logging
from pathlib import Path

from gresdec.config import Config
from gresdec.harness import AXES, FULL_MATRIX, ablate, format_table
from gresdec.synthgres import GenConfig, generate

# (variant, metric, expected sign of variant - full)
EXPECTED = [("hsd_off", "ciou", -1), ("aoc_off", "giou", -1), ("aoc_binary_only", "giou", -1),
            ("intra_off", "giou", -1), ("inter_off", "giou", -1)]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/ablation.json")
    p.add_argument("--axes", nargs="*", default=list(FULL_MATRIX), choices=sorted(AXES))
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    raw = json.loads(Path(args.config).read_text())
    gen = raw.pop("gen", {})
    cfg = Config.from_dict(raw)
    ds = generate(GenConfig(**gen))
    table = ablate(cfg, ds, tuple(args.axes), Path(args.out))
    print(format_table(table))

    rows = {r["variant"]: r for r in table["rows"]}
    full = rows["full"]
    for variant, metric, sign in EXPECTED:
        if variant not in rows or rows[variant][metric] is None or full[metric] is None:
            continue
        delta = rows[variant][metric] - full[metric]
        agrees = "agrees" if delta * sign > 0 else ("tie" if delta == 0 else "disagrees")
        print(f"{variant:<16} {metric}: {100 * delta:+6.2f} ({agrees} with expected direction)")


if __name__ == "__main__":
    main()
