"""Segmentor-only and generator+segmentor prediction, and test-set evaluation."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .objectives import DiceReport, dice_coefficient
from .phantom import DatasetManifest, write_pgm

MODES = ("vanilla", "sge")


@torch.no_grad()
def predict_vanilla(S, x: torch.Tensor) -> torch.Tensor:
    """Argmax of S(x) over classes; ties resolve to the lowest class index."""
    return torch.argmax(S(x), dim=1)


@torch.no_grad()
def predict_sge(G, S, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(argmax S(G(x)), G(x))."""
    x_hat = G(x)
    return torch.argmax(S(x_hat), dim=1), x_hat


def predict(models, x: torch.Tensor, mode: str) -> tuple[torch.Tensor, torch.Tensor | None]:
    if mode == "vanilla":
        return predict_vanilla(models["S"], x), None
    if mode == "sge":
        if "G" not in models:
            raise ValueError("sge prediction needs a generator in the checkpoint")
        return predict_sge(models["G"], models["S"], x)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass
class PredictionRecord:
    image_id: str
    mode: str
    mask: np.ndarray
    dsc: np.ndarray
    duration_s: float


@dataclass
class Evaluation:
    report: DiceReport
    records: list[PredictionRecord]
    timing: dict = field(default_factory=dict)


def _stack(manifest: DatasetManifest, split: str):
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    xs, ys = [], []
    for e in entries:
        if not e.labeled:
            raise ValueError(f"{e.image_path}: no ground truth for evaluation")
        img, msk, _ = manifest.load_sample(e)
        xs.append(img)
        ys.append(msk)
    x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
    return entries, x, np.stack(ys)


def time_batches(models, x: torch.Tensor, mode: str, batch: int = 4, n_batches: int = 20, warmup: int = 3) -> dict:
    """Median wall time per batch, cycling over ``x`` as needed."""
    starts = list(range(0, len(x), batch))
    durations = []
    for i in range(warmup + n_batches):
        s = starts[i % len(starts)]
        xb = x[s : s + batch]
        t0 = time.perf_counter()
        predict(models, xb, mode)
        dt = time.perf_counter() - t0
        if i >= warmup:
            durations.append(dt)
    return {"median_batch_s": statistics.median(durations), "n_batches": n_batches, "batch": batch}


def evaluate(
    models,
    manifest: DatasetManifest,
    split: str = "test",
    mode: str = "vanilla",
    batch: int = 4,
    timing_batches: int = 20,
    export_dir: str | Path | None = None,
) -> Evaluation:
    """Predict every image of ``split`` and aggregate per-class / overall DSC."""
    entries, x, gt = _stack(manifest, split)
    records: list[PredictionRecord] = []
    for s in range(0, len(x), batch):
        xb = x[s : s + batch]
        t0 = time.perf_counter()
        mask, x_hat = predict(models, xb, mode)
        dt = (time.perf_counter() - t0) / len(xb)
        for j, m in enumerate(mask.numpy()):
            e = entries[s + j]
            per_class, _ = dice_coefficient(m, gt[s + j])
            image_id = Path(e.image_path).name.removesuffix("_image.grnt")
            records.append(PredictionRecord(image_id, mode, m.astype(np.uint8), per_class, max(dt, 1e-12)))
            if export_dir is not None:
                out = Path(export_dir)
                out.mkdir(parents=True, exist_ok=True)
                write_pgm(out / f"{image_id}_{mode}_mask.pgm", m, scale=36.0)
                if x_hat is not None:
                    write_pgm(out / f"{image_id}_enhanced.pgm", x_hat[j, 0].numpy())
    report = DiceReport.from_images(np.stack([r.dsc for r in records]))
    timing = time_batches(models, x, mode, batch, timing_batches) if timing_batches > 0 else {}
    return Evaluation(report, records, timing)


@torch.no_grad()
def occlusion_brightening(G, manifest: DatasetManifest, split: str = "test") -> dict:
    """Mean of x and of G(x) over the known occluded pixels of a split."""
    entries, x, _ = _stack(manifest, split)
    occ = np.stack([manifest.load_sample(e)[2] for e in entries]).astype(bool)
    x_hat = torch.cat([G(x[s : s + 4]) for s in range(0, len(x), 4)]).numpy()[:, 0]
    xn = x.numpy()[:, 0]
    if not occ.any():
        raise ValueError(f"split {split!r} has no occluded pixels")
    return {"input_mean": float(xn[occ].mean()), "enhanced_mean": float(x_hat[occ].mean()), "n_pixels": int(occ.sum())}
