import json

import numpy as np
import pytest
import torch

from gresdec import cli
from gresdec.checkpoint import CheckpointError, load_checkpoint
from gresdec.config import Config
from gresdec.harness import (
    ABLATION_SCHEMA, ablate, batch_order, build_model, dataset_tensors, evaluate, load_model, lr_at,
    records_from_dump, save_model, train,
)
from gresdec.metrics import report
from gresdec.model import block_levels, compute_losses, pad_tokens
from gresdec.synthgres import GenConfig, generate


@pytest.fixture(scope="module")
def ds():
    return generate(GenConfig(n_images=16, seed=4))


def small_cfg(steps=10, **model):
    return Config().replace(model={"dim": 16, **model}, optim={"steps": steps, "batch": 4})


def test_steps_zero_checkpoint_is_init(ds, tmp_path):
    cfg = small_cfg(steps=0)
    train(cfg, ds, tmp_path)
    state, cfg_d, meta = load_checkpoint(tmp_path / "checkpoint.bin")
    fresh = build_model(cfg, ds.meta).state_dict()
    assert set(state) == set(fresh)
    for k, v in fresh.items():
        assert torch.equal(state[k], v), k
    assert Config.from_dict(cfg_d) == cfg and meta["C"] == ds.n_categories
    assert (tmp_path / "train_log.jsonl").read_text() == ""


def test_training_is_deterministic(ds, tmp_path):
    cfg = small_cfg(steps=50)
    train(cfg, ds, tmp_path / "a")
    train(cfg, ds, tmp_path / "b")
    for f in ("train_log.jsonl", "checkpoint.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    log = [json.loads(l) for l in (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()]
    assert len(log) == 50 and set(log[0]) == {"step", "loss", "mask_l", "count_l", "exist_l", "lr"}


def test_checkpoint_roundtrip_and_eval_twice(ds, tmp_path):
    cfg = small_cfg(steps=20)
    model, _ = train(cfg, ds, tmp_path)
    rep1, dump1 = evaluate(model, ds)
    rep2, _ = evaluate(model, ds)
    loaded, cfg2, _ = load_model(tmp_path / "checkpoint.bin")
    rep3, dump3 = evaluate(loaded, ds)
    assert rep1.to_json() == rep2.to_json() == rep3.to_json()
    assert dump1 == dump3
    assert cfg2 == cfg


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_float64_values_survive(ds, tmp_path):
    cfg = small_cfg(steps=0).replace(dtype="float64")
    model = build_model(cfg, ds.meta)
    save_model(tmp_path / "c.bin", model, cfg, ds.meta)
    loaded, _, _ = load_model(tmp_path / "c.bin")
    for (k, a), b in zip(model.state_dict().items(), loaded.state_dict().values()):
        assert torch.equal(a.float().double(), b), k


class OracleStub:
    """Emits the ground truth of the dataset it is evaluated on."""

    def __init__(self, ds, empty_always=False):
        self.ds, self.empty_always = ds, empty_always
        self.n_categories = ds.n_categories

    def pad_tokens(self, tokens):
        return pad_tokens(tokens)

    def predict_batch(self, grid, tokens, idx):
        s = [self.ds.samples[i] for i in idx.tolist()]
        masks = torch.as_tensor(np.stack([x.gt_mask for x in s]).astype(np.int64))
        empty = torch.tensor([True] * len(s) if self.empty_always else [x.gt_exist == 0 for x in s])
        n = len(s)
        return {"masks": masks, "empty": empty, "counts": torch.tensor([x.gt_counts for x in s], dtype=torch.float64),
                "alphas": torch.ones(n, 3), "token_gates": torch.ones(n, 3, 21)}


def test_perfect_predictor(ds):
    rep, _ = evaluate(OracleStub(ds), ds)
    assert rep.giou == rep.ciou == rep.n_acc == rep.c_acc == 1.0


def test_constant_empty_predictor():
    mixed = generate(GenConfig(n_images=40, seed=8, scenario_mix={"multi": 0.35, "single": 0.35, "none": 0.3}))
    rep, _ = evaluate(OracleStub(mixed, empty_always=True), mixed)
    n_empty = sum(s.gt_exist == 0 for s in mixed.samples)
    assert n_empty / len(mixed) == pytest.approx(0.3, abs=0.03)
    assert rep.n_acc == 1.0 and rep.miou == 0.0
    assert rep.giou == pytest.approx(n_empty / len(mixed))


def test_category_mismatch(ds):
    other = generate(GenConfig(n_images=2, C=5))
    with pytest.raises(ValueError):
        evaluate(OracleStub(other), ds)


def test_dump_rebuilds_report(ds):
    rep, dump = evaluate(build_model(small_cfg(), ds.meta), ds)
    assert report(records_from_dump(dump)).to_json() == rep.to_json()


def test_ablate_no_axes_equals_plain_run(ds):
    cfg = small_cfg(steps=10)
    table = ablate(cfg, ds)
    assert [r["variant"] for r in table["rows"]] == ["full"]
    model, _ = train(cfg, ds)
    rep, _ = evaluate(model, ds)
    row = table["rows"][0]
    assert (row["giou"], row["ciou"], row["n_acc"], row["c_acc"]) == (rep.giou, rep.ciou, rep.n_acc, rep.c_acc)


def test_ablate_inter_off_alphas(ds, tmp_path):
    import jsonschema
    table = ablate(small_cfg(steps=5), ds, ("inter_off", "hsd_off"), tmp_path)
    rows = {r["variant"]: r for r in table["rows"]}
    assert rows["inter_off"]["alpha_min"] == rows["inter_off"]["alpha_max"] == [1.0, 1.0, 1.0]
    assert rows["hsd_off"]["alpha_max"] == [0.0, 0.0, 1.0]
    jsonschema.validate(json.loads((tmp_path / "ablation.json").read_text()), ABLATION_SCHEMA)
    assert (tmp_path / "ablation.txt").read_text().splitlines()[0].startswith("variant")


def test_ablate_unknown_axis(ds):
    with pytest.raises(ValueError, match="unknown ablation axis"):
        ablate(small_cfg(), ds, ("bogus",))


def _touched(cfg, ds):
    model = build_model(cfg, ds.meta)
    b = dataset_tensors(ds, model).take(torch.arange(4))
    compute_losses(model(b.grid, b.tokens), b.mask, b.counts, b.exist, cfg)["loss"].backward()
    return {k for k, p in model.named_parameters() if p.grad is not None and p.grad.abs().sum() > 0}


def test_intra_flag_isolation(ds):
    on, off = _touched(small_cfg(), ds), _touched(small_cfg(intra=False), ds)
    assert off < on
    assert all(k.startswith("dha.chan_attn.") for k in on - off)
    assert on - off


def test_aoc_off_leaves_counting_untrained(ds):
    touched = _touched(small_cfg(aoc="off"), ds)
    assert not any(k.startswith("aoc.") for k in touched)


@pytest.mark.parametrize("k,expected", [(1, [(0, True), (1, False), (2, False)]),
                                        (3, [(0, True), (1, True), (2, True)]),
                                        (4, [(0, True), (1, True), (2, True), (0, True)])])
def test_block_levels(k, expected):
    assert block_levels(k) == expected


def test_lr_schedule():
    cfg = Config().replace(optim={"steps": 100, "lr": 1e-3})
    assert lr_at(cfg, 0) == 1e-3
    assert lr_at(cfg, 50) == pytest.approx(5e-4)
    assert lr_at(cfg.replace(optim={"schedule": "constant"}), 70) == 1e-3


def test_batch_order_epochs():
    batches = [b.tolist() for b in batch_order(10, 4, 6, seed=0)]
    assert all(len(b) == 4 for b in batches)
    first_epoch = batches[0] + batches[1]
    assert len(set(first_epoch)) == 8


def test_config_validation():
    with pytest.raises(ValueError):
        Config().replace(model={"sdm_layers": 0})
    with pytest.raises(ValueError):
        Config().replace(loss={"lambda_count": -1})
    with pytest.raises(ValueError):
        Config().replace(optim={"lr": 0})


def test_cli_end_to_end(tmp_path, capsys):
    cfg = small_cfg(steps=5).to_dict()
    cfg["data"]["path"] = str(tmp_path / "data")
    cfg["gen"] = {"n_images": 6}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli.main(["gen-data", "--config", str(cfg_path), "--seed", "2"]) == 0
    assert json.loads((tmp_path / "data" / "dataset.json").read_text())["meta"]["seed"] == 2
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.bin"),
                     "--out", str(tmp_path / "ev")]) == 0
    first = (tmp_path / "ev" / "metrics.json").read_text()
    assert cli.main(["metrics", "--dump", str(tmp_path / "ev" / "predictions.jsonl"),
                     "--out", str(tmp_path / "m")]) == 0
    assert (tmp_path / "m" / "metrics.json").read_text() == first
    assert cli.main(["ablate", "--config", str(cfg_path), "--axes", "inter_off",
                     "--out", str(tmp_path / "ab")]) == 0
    assert "inter_off" in capsys.readouterr().out
