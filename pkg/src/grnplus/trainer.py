"""Two-stage generator+segmentor training, its single-stage ablation and a segmentor-only baseline."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import torch

from . import diffcore as dc
from . import rng as rngmod
from .models import (
    GeneratorConfig,
    SegmentorConfig,
    build_generator,
    build_segmentor,
    checkpoint_bytes,
    config_from_dict,
    config_to_dict,
)
from .objectives import dice_coefficient, dice_loss, stage1_loss, stage2_loss
from .phantom import DatasetManifest, select_labeled_subset

log = logging.getLogger(__name__)

MODES = ("grn_plus", "grn_plus_single_stage", "supervised")
MODE_ALIASES = {"grn+": "grn_plus", "grn+single": "grn_plus_single_stage", "supervised": "supervised"}

# backbones small enough for 128x128 training runs on one CPU core
DESK_SEGMENTOR = SegmentorConfig(encoder_channels=(4, 8, 16, 32))
DESK_GENERATOR = GeneratorConfig(stem_channels=4, n_down=2, n_res_blocks=1)


class TrainConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "grn_plus"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 4
    max_epochs: int = 15
    patience: int = 5
    min_delta: float = 1e-6
    lambda_seg: float = 1.0
    labeled_fraction: float = 1.0
    seed: int = 0
    clip: float | None = None
    # "recompute": S(x_hat) with post-stage-1 weights; "reuse": stage-1 value as a constant term
    stage2_input: str = "recompute"
    segmentor: SegmentorConfig = field(default_factory=SegmentorConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise TrainConfigError(f"mode must be one of {MODES} (or {tuple(MODE_ALIASES)}), got {self.mode!r}")
        if not self.lr >= 0:
            raise TrainConfigError(f"lr must be >= 0, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise TrainConfigError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.batch < 1 or self.max_epochs < 1 or self.patience < 1:
            raise TrainConfigError("batch, max_epochs and patience must all be >= 1")
        if not 0 < self.labeled_fraction <= 1:
            raise TrainConfigError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if self.clip is not None and self.clip <= 0:
            raise TrainConfigError(f"clip must be positive when set, got {self.clip}")
        if self.stage2_input not in ("recompute", "reuse"):
            raise TrainConfigError(f"stage2_input must be 'recompute' or 'reuse', got {self.stage2_input!r}")
        self.segmentor.validate()
        self.generator.validate()

    @property
    def uses_generator(self) -> bool:
        return self.mode != "supervised"

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["segmentor"] = config_to_dict(self.segmentor)
        d["generator"] = config_to_dict(self.generator)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, kind in (("segmentor", "SegmentorConfig"), ("generator", "GeneratorConfig")):
            if key in d and isinstance(d[key], Mapping):
                d[key] = config_from_dict({"kind": kind, **{k: v for k, v in d[key].items() if k != "kind"}})
        return cls(**d)


@dataclass
class StepRecord:
    iteration: int
    loss_stage1: float | None = None
    loss_stage2: float | None = None
    grad_G_stage1: float | None = None
    grad_S_stage1: float | None = None
    grad_G_stage2: float | None = None
    grad_S_stage2: float | None = None
    failure: str | None = None


@dataclass
class RunHistory:
    mode: str
    epochs: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    stop_reason: str = ""
    failed: bool = False
    failures: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    EPOCH_COLUMNS = (
        "epoch",
        "train_loss",
        "train_stage1",
        "train_stage2",
        "val_loss",
        "val_loss_vanilla",
        "val_loss_sge",
        "val_dsc",
        "nan_events",
    )

    @property
    def nan_events(self) -> int:
        return len(self.failures)

    @property
    def final_val_loss(self) -> float:
        return self.epochs[-1]["val_loss"]

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.EPOCH_COLUMNS)
        for row in self.epochs:
            w.writerow([_fmt(row.get(c)) for c in self.EPOCH_COLUMNS])
        return buf.getvalue()

    def grad_norms_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "stage", "grad_norm_G", "grad_norm_S", "loss"])
        for s in self.steps:
            w.writerow([s.iteration, 1, _fmt(s.grad_G_stage1), _fmt(s.grad_S_stage1), _fmt(s.loss_stage1)])
            if s.loss_stage2 is not None:
                w.writerow([s.iteration, 2, _fmt(s.grad_G_stage2), _fmt(s.grad_S_stage2), _fmt(s.loss_stage2)])
        return buf.getvalue()

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "epochs": self.epochs,
            "steps": [dataclasses.asdict(s) for s in self.steps],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "failed": self.failed,
            "failures": self.failures,
        }
        if include_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def make_states() -> dict[str, dc.AdamState]:
    return {"G": dc.AdamState(), "S": dc.AdamState()}


def _prefixed(**models) -> dict[str, torch.nn.Parameter]:
    out = {}
    for tag, m in models.items():
        for name, p in m.named_parameters():
            out[f"{tag}.{name}"] = p
    return out


def _finite(*values: float) -> bool:
    return all(v is not None and math.isfinite(v) for v in values)


def _adam(params, state, cfg: TrainConfig) -> None:
    dc.adam_step(params, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def _clear(params) -> None:
    for p in params.values():
        p.grad = None


def stage1_update(G, S, x, y, states, cfg: TrainConfig, rec: StepRecord):
    """Dice(S(G(x))) backpropagated through both models, Adam on both.

    Returns (detached G(x), unscaled stage-1 Dice), or (None, None) on a non-finite step.
    """
    pG, pS = G.named_params(), S.named_params()
    loss, x_hat = stage1_loss(G, S, x, y, cfg.lambda_seg)
    dc.backward(loss.value, _prefixed(G=G, S=S))
    rec.loss_stage1 = loss.item()
    rec.grad_G_stage1 = dc.grad_norm(pG)
    rec.grad_S_stage1 = dc.grad_norm(pS)
    if not _finite(rec.loss_stage1, rec.grad_G_stage1, rec.grad_S_stage1):
        _clear(pG)
        _clear(pS)
        rec.failure = "non-finite stage-1 loss or gradient"
        return None, None
    if cfg.clip is not None:
        dc.clip_grad_norm(pG, cfg.clip)
        dc.clip_grad_norm(pS, cfg.clip)
    _adam(pG, states["G"], cfg)
    _adam(pS, states["S"], cfg)
    return x_hat.detach(), loss.breakdown["stage1_dice"]


def stage2_update(G, S, x, x_hat, y, states, cfg: TrainConfig, rec: StepRecord, stage1_dice=None) -> None:
    """Average Dice on x and the detached reconstruction, Adam on the segmentor only."""
    pG, pS = G.named_params(), S.named_params()
    if cfg.stage2_input == "reuse":
        orig = dice_loss(S(x), y).value
        value = (orig + torch.as_tensor(stage1_dice, dtype=orig.dtype)) / 2
    else:
        value = stage2_loss(S, x, x_hat, y).value
    # generator parameters included on purpose: their gradient must come out exactly zero
    dc.backward(value, _prefixed(G=G, S=S))
    rec.loss_stage2 = float(value.detach())
    rec.grad_G_stage2 = dc.grad_norm(pG)
    rec.grad_S_stage2 = dc.grad_norm(pS)
    _clear(pG)
    if not _finite(rec.loss_stage2, rec.grad_S_stage2):
        _clear(pS)
        rec.failure = "non-finite stage-2 loss or gradient"
        return
    if cfg.clip is not None:
        dc.clip_grad_norm(pS, cfg.clip)
    _adam(pS, states["S"], cfg)


def train_step_grn_plus(G, S, batch, states, cfg: TrainConfig, iteration: int = 0) -> StepRecord:
    x, y = batch
    rec = StepRecord(iteration)
    x_hat, s1_dice = stage1_update(G, S, x, y, states, cfg, rec)
    if x_hat is not None:
        stage2_update(G, S, x, x_hat, y, states, cfg, rec, s1_dice)
    return rec


def train_step_single_stage(G, S, batch, states, cfg: TrainConfig, iteration: int = 0) -> StepRecord:
    x, y = batch
    rec = StepRecord(iteration)
    stage1_update(G, S, x, y, states, cfg, rec)
    return rec


def train_step_supervised(S, batch, state: dc.AdamState, cfg: TrainConfig, iteration: int = 0) -> StepRecord:
    x, y = batch
    rec = StepRecord(iteration)
    pS = S.named_params()
    loss = dice_loss(S(x), y).value
    dc.backward(loss, pS)
    rec.loss_stage1 = float(loss.detach())
    rec.grad_S_stage1 = dc.grad_norm(pS)
    if not _finite(rec.loss_stage1, rec.grad_S_stage1):
        _clear(pS)
        rec.failure = "non-finite loss or gradient"
        return rec
    if cfg.clip is not None:
        dc.clip_grad_norm(pS, cfg.clip)
    _adam(pS, state, cfg)
    return rec


def dga_divergence_probe(G_before, G_after, x: torch.Tensor) -> float:
    """max |G_after(x) - G_before(x)| for two generator snapshots."""
    shapes_a = [p.shape for p in G_before.parameters()]
    shapes_b = [p.shape for p in G_after.parameters()]
    if shapes_a != shapes_b:
        raise dc.DimensionError("generator snapshots have different parameter shapes")
    with torch.no_grad():
        a, b = G_before(x), G_after(x)
    if a.shape != b.shape:
        raise dc.DimensionError(f"snapshot outputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(torch.max(torch.abs(b - a)))


# ---------------------------------------------------------------------------
# data and evaluation helpers


def load_split(manifest: DatasetManifest, split: str, labeled_only: bool = False):
    """Stack a split into (x (N,1,H,W) float32, y (N,H,W) int64, occlusion (N,H,W) bool)."""
    entries = [e for e in manifest.split(split) if e.labeled or not labeled_only]
    if not entries:
        raise TrainingError(f"split {split!r} has no {'labeled ' if labeled_only else ''}entries")
    xs, ys, os_ = [], [], []
    for e in entries:
        img, msk, occ = manifest.load_sample(e)
        xs.append(img)
        ys.append(msk)
        os_.append(occ)
    x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(ys).astype(np.int64))
    occ = torch.from_numpy(np.stack(os_).astype(bool))
    return x, y, occ


def batches(n: int, size: int, order: torch.Tensor | None = None):
    idx = torch.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start : start + size]


@torch.no_grad()
def validation_metrics(G, S, x, y, batch: int) -> dict[str, float]:
    """Dice loss on the S(x) path and, when a generator is given, the S(G(x)) path; plus hard DSC."""
    out: dict[str, float] = {}
    paths = {"vanilla": lambda xb: S(xb)}
    if G is not None:
        paths["sge"] = lambda xb: S(G(xb))
    for name, fn in paths.items():
        total, dsc = 0.0, []
        for idx in batches(len(x), batch):
            logits = fn(x[idx])
            total += dice_loss(logits, y[idx]).item() * len(idx)
            pred = torch.argmax(logits, dim=1).numpy()
            for p, g in zip(pred, y[idx].numpy()):
                dsc.append(dice_coefficient(p, g)[1])
        out[f"val_loss_{name}"] = total / len(x)
        out[f"val_dsc_{name}"] = float(np.mean(dsc))
    return out


@dataclass
class TrainResult:
    models: dict[str, torch.nn.Module]
    history: RunHistory
    config: TrainConfig

    def checkpoint_bytes(self) -> bytes:
        return checkpoint_bytes(self.models)


def build_models(cfg: TrainConfig) -> dict[str, torch.nn.Module]:
    models = {"S": build_segmentor(cfg.segmentor, rngmod.torch_generator(cfg.seed, "init", "segmentor"))}
    if cfg.uses_generator:
        models["G"] = build_generator(cfg.generator, rngmod.torch_generator(cfg.seed, "init", "generator"))
    return models


def run_training(cfg: TrainConfig, manifest: DatasetManifest) -> TrainResult:
    """Epoch loop with per-epoch validation, best-checkpoint selection and early stopping."""
    cfg.validate()
    subset = select_labeled_subset(manifest, cfg.labeled_fraction, cfg.seed)
    x_tr, y_tr, _ = load_split(subset, "train", labeled_only=True)
    x_val, y_val, _ = load_split(subset, "val")
    models = build_models(cfg)
    S, G = models["S"], models.get("G")
    states = make_states()
    hist = RunHistory(cfg.mode)
    path = "sge" if cfg.uses_generator else "vanilla"

    def evaluate(epoch: int, train: dict) -> dict:
        m = validation_metrics(G, S, x_val, y_val, cfg.batch)
        row = {"epoch": epoch, **train}
        row["val_loss"] = m[f"val_loss_{path}"]
        row["val_dsc"] = m[f"val_dsc_{path}"]
        row["val_loss_vanilla"] = m["val_loss_vanilla"]
        row["val_loss_sge"] = m.get("val_loss_sge")
        return row

    t_start = time.perf_counter()
    hist.epochs.append(evaluate(0, {"nan_events": 0}))
    best_state = None
    since_best = 0
    iteration = 0
    epoch_times = []
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = torch.randperm(len(x_tr), generator=rngmod.torch_generator(cfg.seed, "shuffle", epoch))
        recs = []
        for idx in batches(len(x_tr), cfg.batch, order):
            batch = (x_tr[idx], y_tr[idx])
            if cfg.mode == "grn_plus":
                rec = train_step_grn_plus(G, S, batch, states, cfg, iteration)
            elif cfg.mode == "grn_plus_single_stage":
                rec = train_step_single_stage(G, S, batch, states, cfg, iteration)
            else:
                rec = train_step_supervised(S, batch, states["S"], cfg, iteration)
            if rec.failure:
                hist.failures.append({"iteration": iteration, "epoch": epoch, "reason": rec.failure})
                log.warning("iteration %d: %s", iteration, rec.failure)
            recs.append(rec)
            iteration += 1
        hist.steps.extend(recs)
        ok = [r for r in recs if not r.failure]
        nan_events = len(recs) - len(ok)
        train = {"nan_events": nan_events}
        if ok:
            s1 = float(np.mean([r.loss_stage1 for r in ok]))
            train["train_stage1"] = s1
            train["train_loss"] = s1
            if cfg.mode == "grn_plus":
                train["train_stage2"] = float(np.mean([r.loss_stage2 for r in ok]))
        row = evaluate(epoch, train)
        hist.epochs.append(row)
        epoch_times.append(time.perf_counter() - t0)
        log.info("epoch %d val_loss %.5f val_dsc %.4f", epoch, row["val_loss"], row["val_dsc"])
        if not ok:
            hist.failed = True
            hist.stop_reason = f"all iterations in epoch {epoch} produced non-finite values"
            break
        if not math.isfinite(row["val_loss"]):
            hist.failed = True
            hist.stop_reason = f"non-finite validation loss at epoch {epoch}"
            break
        if hist.best_val_loss is None or row["val_loss"] < hist.best_val_loss - cfg.min_delta:
            hist.best_val_loss = row["val_loss"]
            hist.best_epoch = epoch
            best_state = {k: copy.deepcopy(m.state_dict()) for k, m in models.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                hist.stop_reason = f"no improvement for {cfg.patience} consecutive epochs"
                break
    else:
        hist.stop_reason = "reached max_epochs"
    if best_state is not None:
        for k, m in models.items():
            m.load_state_dict(best_state[k])
    hist.timing = {"total_s": time.perf_counter() - t_start, "epoch_s": epoch_times}
    return TrainResult(models, hist, cfg)
