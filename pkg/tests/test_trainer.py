import csv
import io
import json
import math

import pytest
import torch
from conftest import TINY_GENERATOR, TINY_SEGMENTOR, tiny_config

from grnplus import diffcore as dc
from grnplus import models as M
from grnplus import trainer as T


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def changed(before, model):
    return [n for n, p in model.named_parameters() if not torch.equal(before[n], p.detach())]


def setup(seed=0, lr=2e-4, **kw):
    cfg = tiny_config(lr=lr, seed=seed, **kw)
    models = T.build_models(cfg)
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, 16, 16, generator=g)
    y = torch.randint(0, 7, (2, 16, 16), generator=g)
    return cfg, models["G"], models["S"], (x, y)


def test_segmentor_moves_at_both_stages_and_generator_only_at_stage1():
    cfg, G, S, (x, y) = setup()
    states = T.make_states()
    g0, s0 = snapshot(G), snapshot(S)
    rec = T.StepRecord(0)
    x_hat, d1 = T.stage1_update(G, S, x, y, states, cfg, rec)
    g1, s1 = snapshot(G), snapshot(S)
    assert changed(g0, G) and changed(s0, S)
    T.stage2_update(G, S, x, x_hat, y, states, cfg, rec, d1)
    assert changed(s1, S)
    assert changed(g1, G) == []
    assert rec.grad_G_stage2 == 0.0 and rec.grad_S_stage2 > 0
    assert all(p.grad is None for p in G.parameters())
    assert states["G"].t == 1 and states["S"].t == 2


def test_stage1_gradient_reaches_the_generator():
    cfg, G, S, (x, y) = setup(seed=3)
    loss, _ = T.stage1_loss(G, S, x, y, cfg.lambda_seg)
    dc.backward(loss.value, {f"G.{n}": p for n, p in G.named_parameters()})
    norms = [float(p.grad.norm()) for p in G.parameters()]
    assert max(norms) > 0
    assert all(math.isfinite(v) for v in norms)


def test_zero_lr_leaves_everything_bitwise_unchanged():
    cfg, G, S, batch = setup(lr=0.0)
    g0, s0 = snapshot(G), snapshot(S)
    rec = T.train_step_grn_plus(G, S, batch, T.make_states(), cfg)
    assert changed(g0, G) == [] and changed(s0, S) == []
    assert rec.loss_stage1 > 0 and rec.loss_stage2 > 0
    T.train_step_supervised(S, batch, dc.AdamState(), cfg)
    assert changed(s0, S) == []


def test_single_stage_shares_the_first_update_with_grn_plus():
    cfg, G, S, batch = setup(seed=1)
    cfg2, G2, S2, _ = setup(seed=1)
    rec_a = T.train_step_single_stage(G, S, batch, T.make_states(), cfg)
    states = T.make_states()
    rec_b = T.StepRecord(0)
    T.stage1_update(G2, S2, *batch, states, cfg2, rec_b)
    for a, b in ((G, G2), (S, S2)):
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)
    assert rec_a.loss_stage1 == rec_b.loss_stage1
    assert rec_a.loss_stage2 is None and rec_a.grad_G_stage2 is None


def test_single_stage_updates_segmentor_once():
    cfg, G, S, batch = setup(seed=2)
    states = T.make_states()
    T.train_step_single_stage(G, S, batch, states, cfg)
    assert states["S"].t == 1 and states["G"].t == 1


def test_reuse_variant_uses_stage1_value():
    cfg, G, S, (x, y) = setup(seed=4, stage2_input="reuse")
    rec = T.StepRecord(0)
    states = T.make_states()
    x_hat, d1 = T.stage1_update(G, S, x, y, states, cfg, rec)
    with torch.no_grad():
        orig = T.dice_loss(S(x), y).item()
    T.stage2_update(G, S, x, x_hat, y, states, cfg, rec, d1)
    assert rec.loss_stage2 == pytest.approx((orig + d1) / 2, rel=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_dga_probe_detects_a_stage1_update(seed):
    cfg, G, S, (x, y) = setup(seed=seed)
    before = M.Generator(G.config)
    before.load_state_dict(G.state_dict())
    assert T.dga_divergence_probe(before, G, x) == 0.0
    T.stage1_update(G, S, x, y, T.make_states(), cfg, T.StepRecord(0))
    held_out = torch.rand(2, 1, 16, 16, generator=torch.Generator().manual_seed(100 + seed))
    assert T.dga_divergence_probe(before, G, held_out) > 0


def test_dga_probe_is_zero_at_zero_lr_and_checks_shapes():
    cfg, G, S, (x, y) = setup(lr=0.0)
    before = M.Generator(G.config)
    before.load_state_dict(G.state_dict())
    T.stage1_update(G, S, x, y, T.make_states(), cfg, T.StepRecord(0))
    assert T.dga_divergence_probe(before, G, x) == 0.0
    other = M.build_generator(M.GeneratorConfig(stem_channels=3, n_down=1, n_res_blocks=1))
    with pytest.raises(dc.DimensionError):
        T.dga_divergence_probe(G, other, x)


def test_supervised_overfits_four_images(tiny_manifest):
    # threshold from a one-off oracle run: 0.881 -> 0.387 after 20 steps
    x, y, _ = T.load_split(tiny_manifest, "train")
    x, y = x[:4], y[:4]
    cfg = T.TrainConfig(mode="supervised", lr=3e-3, segmentor=M.SegmentorConfig(encoder_channels=(16, 32, 64)))
    S = T.build_models(cfg)["S"]
    state = dc.AdamState()
    losses = [T.train_step_supervised(S, (x, y), state, cfg, i).loss_stage1 for i in range(20)]
    assert losses[-1] < 0.45
    assert losses[-1] < 0.5 * losses[0]


def test_supervised_run_has_no_generator(tiny_manifest):
    res = T.run_training(tiny_config(mode="supervised", max_epochs=1), tiny_manifest)
    assert set(res.models) == {"S"}
    assert res.history.epochs[1]["val_loss_sge"] is None


def test_frozen_validation_stops_after_patience_plus_one(tiny_manifest):
    res = T.run_training(tiny_config(lr=0.0, max_epochs=20, patience=3), tiny_manifest)
    h = res.history
    assert [e["epoch"] for e in h.epochs] == list(range(0, 3 + 2))
    assert h.best_epoch == 1 and "3 consecutive" in h.stop_reason
    assert not h.failed


def test_improving_validation_runs_every_epoch(tiny_manifest, monkeypatch):
    calls = iter(range(100))

    def improving(G, S, x, y, batch):
        v = 1.0 / (2 + next(calls))
        return {"val_loss_vanilla": v, "val_dsc_vanilla": 0.0, "val_loss_sge": v, "val_dsc_sge": 0.0}

    monkeypatch.setattr(T, "validation_metrics", improving)
    res = T.run_training(tiny_config(lr=0.0, max_epochs=7, patience=5), tiny_manifest)
    assert len(res.history.epochs) == 8 and res.history.best_epoch == 7
    assert res.history.stop_reason == "reached max_epochs"


def test_runs_are_bitwise_reproducible(tiny_manifest):
    a = T.run_training(tiny_config(seed=5), tiny_manifest)
    b = T.run_training(tiny_config(seed=5), tiny_manifest)
    assert a.checkpoint_bytes() == b.checkpoint_bytes()
    assert a.history.epochs_csv() == b.history.epochs_csv()
    assert a.history.grad_norms_csv() == b.history.grad_norms_csv()
    assert a.history.to_json(include_timing=False) == b.history.to_json(include_timing=False)
    c = T.run_training(tiny_config(seed=6), tiny_manifest)
    assert c.checkpoint_bytes() != a.checkpoint_bytes()


def test_history_schema_matches_across_modes(tiny_manifest):
    multi = T.run_training(tiny_config(max_epochs=1), tiny_manifest).history
    single = T.run_training(tiny_config(mode="grn+single", max_epochs=1), tiny_manifest).history
    assert multi.epochs[0] == single.epochs[0]
    head = lambda h: next(csv.reader(io.StringIO(h.epochs_csv())))  # noqa: E731
    assert head(multi) == head(single) == list(T.RunHistory.EPOCH_COLUMNS)
    rows = list(csv.DictReader(io.StringIO(multi.grad_norms_csv())))
    assert {r["stage"] for r in rows} == {"1", "2"}
    assert all(float(r["grad_norm_G"]) == 0.0 for r in rows if r["stage"] == "2")
    assert all(math.isfinite(float(r["grad_norm_S"])) for r in rows)
    assert len({r["stage"] for r in csv.DictReader(io.StringIO(single.grad_norms_csv()))}) == 1
    d = json.loads(multi.to_json())
    assert d["mode"] == "grn_plus" and "timing" in d


def test_all_nan_epoch_fails_run_and_keeps_history(tiny_manifest, monkeypatch):
    real = T.stage1_loss

    def poisoned(*a, **kw):
        loss, x_hat = real(*a, **kw)
        loss.value = loss.value * float("nan")
        return loss, x_hat

    monkeypatch.setattr(T, "stage1_loss", poisoned)
    res = T.run_training(tiny_config(max_epochs=5), tiny_manifest)
    h = res.history
    assert h.failed and "epoch 1" in h.stop_reason
    assert h.nan_events == 2 == h.epochs[1]["nan_events"]
    assert [f["iteration"] for f in h.failures] == [0, 1]
    assert len(h.epochs) == 2


def test_empty_labeled_set_is_an_error(tiny_manifest):
    with pytest.raises(T.TrainingError, match="no"):
        T.load_split(tiny_manifest, "nope")


@pytest.mark.parametrize(
    "kw",
    [
        {"mode": "cyclegan"},
        {"lr": -1.0},
        {"lr": float("nan")},
        {"beta1": 1.0},
        {"max_epochs": 0},
        {"patience": 0},
        {"labeled_fraction": 0.0},
        {"clip": 0.0},
        {"stage2_input": "stale"},
    ],
)
def test_config_validation(kw):
    with pytest.raises(T.TrainConfigError):
        T.TrainConfig(**kw)


def test_config_dict_round_trip():
    cfg = T.TrainConfig(mode="grn+single", segmentor=TINY_SEGMENTOR, generator=TINY_GENERATOR, clip=1.0)
    assert cfg.mode == "grn_plus_single_stage"
    back = T.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(T.TrainConfigError, match="unknown"):
        T.TrainConfig.from_dict({"epochs": 3})
