"""Command line entry point: ``gresdec {gen-data,train,eval,ablate,metrics}``.

Every subcommand takes the same JSON config file (``--config``); ``--seed``
and ``--out`` override the seed and output location. The config's optional
``gen`` section holds :class:`~gresdec.synthgres.GenConfig` fields.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, metrics
from .config import Config
from .synthgres import GenConfig, GresDataset, generate

log = logging.getLogger("gresdec")


def _load(args) -> tuple[Config, dict]:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    gen = raw.pop("gen", {})
    cfg = Config.from_dict(raw)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg, gen


def _write_eval(out: Path, rep: metrics.MetricReport, dump: list[dict] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(rep.to_json())
    if dump is not None:
        with open(out / "predictions.jsonl", "w") as f:
            for d in dump:
                f.write(json.dumps(d) + "\n")
    print(rep.to_json(), end="")


def cmd_gen_data(args) -> int:
    cfg, gen = _load(args)
    if args.seed is not None:
        gen["seed"] = args.seed
    out = Path(args.out or cfg.data.path)
    ds = generate(GenConfig(**gen))
    ds.save(out)
    log.info("wrote %d samples to %s", len(ds), out)
    return 0


def cmd_train(args) -> int:
    cfg, _ = _load(args)
    ds = GresDataset.load(args.data or cfg.data.path)
    out = Path(args.out or "runs/train")
    _, records = harness.train(cfg, ds, out)
    if records:
        log.info("final loss %.5f (mask %.5f)", records[-1]["loss"], records[-1]["mask_l"])
    log.info("checkpoint written to %s", out / "checkpoint.bin")
    return 0


def cmd_eval(args) -> int:
    model, cfg, meta = harness.load_model(args.checkpoint)
    ds = GresDataset.load(args.data or cfg.data.path)
    harness.check_compatible(meta, ds)
    rep, dump = harness.evaluate(model, ds)
    _write_eval(Path(args.out or "runs/eval"), rep, dump)
    return 0


def cmd_ablate(args) -> int:
    cfg, _ = _load(args)
    ds = GresDataset.load(args.data or cfg.data.path)
    axes = harness.FULL_MATRIX if args.full else tuple(a for a in (args.axes or "").split(",") if a)
    table = harness.ablate(cfg, ds, axes, Path(args.out or "runs/ablation"))
    print(harness.format_table(table), end="")
    return 0


def cmd_metrics(args) -> int:
    with open(args.dump) as f:
        dump = [json.loads(line) for line in f if line.strip()]
    rep = metrics.report(harness.records_from_dump(dump))
    _write_eval(Path(args.out or Path(args.dump).parent), rep)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gresdec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    common(sub.add_parser("gen-data", help="generate a synthetic dataset")).set_defaults(fn=cmd_gen_data)
    sp = common(sub.add_parser("train", help="train and write checkpoint.bin + train_log.jsonl"))
    sp.add_argument("--data")
    sp.set_defaults(fn=cmd_train)
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("ablate", help="train/evaluate ablation variants"))
    sp.add_argument("--data")
    sp.add_argument("--axes", help="comma separated, e.g. hsd_off,inter_off")
    sp.add_argument("--full", action="store_true", help="run the full ablation matrix")
    sp.set_defaults(fn=cmd_ablate)
    sp = common(sub.add_parser("metrics", help="recompute metrics from a predictions.jsonl dump"))
    sp.add_argument("--dump", required=True)
    sp.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
