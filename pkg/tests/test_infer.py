import dataclasses

import numpy as np
import pytest
import torch
from conftest import TINY_GENERATOR, TINY_SEGMENTOR

from grnplus import infer as I
from grnplus import models as M


class FixedLogits(torch.nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = logits

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1, x.shape[2], x.shape[3])


class Identity(torch.nn.Module):
    def forward(self, x):
        return x


def models(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {"G": M.build_generator(TINY_GENERATOR, g), "S": M.build_segmentor(TINY_SEGMENTOR, g)}


def test_argmax_and_tie_break():
    z = torch.zeros(1, 7, 1, 1)
    z[0, 3] = 5.0
    assert torch.all(I.predict_vanilla(FixedLogits(z), torch.zeros(2, 1, 4, 4)) == 3)
    tie = torch.zeros(1, 7, 1, 1)
    tie[0, 2] = tie[0, 5] = 1.0
    assert torch.all(I.predict_vanilla(FixedLogits(tie), torch.zeros(1, 1, 2, 2)) == 2)


def test_sge_with_identity_generator_matches_vanilla():
    S = models()["S"]
    x = torch.rand(2, 1, 8, 8, generator=torch.Generator().manual_seed(1))
    mask, x_hat = I.predict_sge(Identity(), S, x)
    assert torch.equal(mask, I.predict_vanilla(S, x)) and torch.equal(x_hat, x)


def test_sge_is_the_composition_and_range():
    m = models(2)
    x = torch.rand(3, 1, 16, 16, generator=torch.Generator().manual_seed(2))
    mask, x_hat = I.predict_sge(m["G"], m["S"], x)
    with torch.no_grad():
        assert torch.equal(mask, I.predict_vanilla(m["S"], m["G"](x)))
    assert float(x_hat.min()) > 0 and float(x_hat.max()) < 1
    a, _ = I.predict(m, x, "vanilla")
    b, _ = I.predict(m, x, "vanilla")
    assert torch.equal(a, b)


def test_predict_mode_errors():
    with pytest.raises(ValueError, match="generator"):
        I.predict({"S": models()["S"]}, torch.zeros(1, 1, 4, 4), "sge")
    with pytest.raises(ValueError, match="mode"):
        I.predict(models(), torch.zeros(1, 1, 4, 4), "tta")


class Oracle(torch.nn.Module):
    """Returns one-hot logits of the ground truth looked up by image content."""

    def __init__(self, xs, ys):
        super().__init__()
        self.table = {x.numpy().tobytes(): y for x, y in zip(xs, ys)}

    def forward(self, x):
        ys = torch.stack([torch.as_tensor(self.table[xi.numpy().tobytes()]) for xi in x]).long()
        return torch.nn.functional.one_hot(ys, 7).permute(0, 3, 1, 2).float()


def test_oracle_predictor_scores_one(tiny_manifest):
    entries = tiny_manifest.split("test")
    xs = [torch.from_numpy(tiny_manifest.load_sample(e)[0][None].astype(np.float32)) for e in entries]
    ys = [tiny_manifest.load_sample(e)[1] for e in entries]
    ev = I.evaluate({"S": Oracle(xs, ys)}, tiny_manifest, "test", timing_batches=0)
    assert ev.report.overall == 1.0
    assert all(np.all(r.dsc == 1.0) for r in ev.records)
    assert len(ev.report.rows()) == 7 and ev.timing == {}


def test_untrained_report_is_well_formed_and_exports(tiny_manifest, tmp_path):
    m = models()
    ev = I.evaluate(m, tiny_manifest, "val", "sge", timing_batches=2, export_dir=tmp_path)
    assert ev.report.n_images == 2 and len(ev.records) == 2
    for name, v, lo, hi in ev.report.rows():
        assert 0.0 <= v <= 1.0, name
        assert lo <= v <= hi, name
    for r in ev.records:
        assert r.mode == "sge" and r.duration_s > 0 and r.mask.dtype == np.uint8
        assert set(np.unique(r.mask)) <= set(range(7))
    pgms = sorted(p.name for p in tmp_path.iterdir())
    assert len(pgms) == 4 and all(p.endswith(".pgm") for p in pgms)
    raw = (tmp_path / pgms[0]).read_bytes()
    assert raw.startswith(b"P5\n32 64\n255\n") and len(raw) == len(b"P5\n32 64\n255\n") + 64 * 32
    assert ev.timing["n_batches"] == 2 and ev.timing["median_batch_s"] > 0


def test_vanilla_batch_time_below_sge():
    # a generator far heavier than the segmentor makes the ordering unambiguous
    g = torch.Generator().manual_seed(0)
    m = {
        "G": M.build_generator(M.GeneratorConfig(stem_channels=8, n_down=2, n_res_blocks=2), g),
        "S": M.build_segmentor(M.SegmentorConfig(encoder_channels=(4, 8, 16, 32)), g),
    }
    x = torch.rand(8, 1, 64, 64, generator=g)
    v = I.time_batches(m, x, "vanilla", n_batches=20)["median_batch_s"]
    s = I.time_batches(m, x, "sge", n_batches=20)["median_batch_s"]
    assert v < s


def test_evaluate_rejects_empty_or_unlabeled_split(tiny_manifest):
    with pytest.raises(ValueError, match="empty"):
        I.evaluate(models(), tiny_manifest, "nope")
    entries = [dataclasses.replace(e, labeled=False) for e in tiny_manifest.entries]
    unlabeled = dataclasses.replace(tiny_manifest, entries=entries)
    with pytest.raises(ValueError, match="ground truth"):
        I.evaluate(models(), unlabeled, "test")


def test_occlusion_statistics(tiny_manifest):
    stats = I.occlusion_brightening(Identity(), tiny_manifest, "test")
    assert stats["n_pixels"] > 0
    assert stats["input_mean"] == pytest.approx(stats["enhanced_mean"])
