"""Soft Dice losses, the two-stage composite losses, hard DSC and test statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import diffcore as dc
from .phantom import LAYER_NAMES, N_CLASSES

SMOOTH = 1e-5


class DataError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


class StatisticsError(ValueError):
    pass


@dataclass
class LossValue:
    value: torch.Tensor
    breakdown: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def _check_labels(mask: torch.Tensor, n_classes: int) -> None:
    lo, hi = int(mask.min()), int(mask.max())
    if lo < 0 or hi >= n_classes:
        bad = lo if lo < 0 else hi
        raise DataError(f"mask label {bad} outside 0..{n_classes - 1}")


def dice_loss(logits: torch.Tensor, mask: torch.Tensor, smooth: float = SMOOTH) -> LossValue:
    """1 - mean over all classes of (2 sum p y + s) / (sum p + sum y + s), summed over batch and pixels."""
    if logits.dim() != 4 or mask.shape != (logits.shape[0], *logits.shape[2:]):
        raise dc.DimensionError(f"dice_loss: logits {tuple(logits.shape)} vs mask {tuple(mask.shape)}")
    n_classes = logits.shape[1]
    mask = mask.long()
    _check_labels(mask, n_classes)
    p = dc.softmax_channels(logits)
    y = torch.nn.functional.one_hot(mask, n_classes).permute(0, 3, 1, 2).to(p.dtype)
    dims = (0, 2, 3)
    inter = torch.sum(p * y, dim=dims)
    denom = torch.sum(p, dim=dims) + torch.sum(y, dim=dims)
    dice = (2 * inter + smooth) / (denom + smooth)
    loss = 1.0 - dice.mean()
    return LossValue(loss, {"dice_loss": float(loss.detach())})


def stage1_loss(G, S, x: torch.Tensor, y: torch.Tensor, lambda_seg: float = 1.0) -> tuple[LossValue, torch.Tensor]:
    """lambda_seg * Dice(S(G(x)), y) with the graph spanning both models.

    Returns the loss and the reconstructed batch G(x) (still attached).
    """
    x_hat = G(x)
    base = dice_loss(S(x_hat), y)
    value = lambda_seg * base.value
    return LossValue(value, {"stage1": float(value.detach()), "stage1_dice": base.item()}), x_hat


def stage2_loss(S, x: torch.Tensor, x_hat: torch.Tensor, y: torch.Tensor) -> LossValue:
    """(Dice(S(x), y) + Dice(S(x_hat), y)) / 2 on a detached reconstruction."""
    if x_hat.requires_grad:
        raise ContractViolation("stage2_loss: reconstructed images are still attached to the generator graph")
    orig = dice_loss(S(x), y).value
    recon = dice_loss(S(x_hat), y).value
    value = (orig + recon) / 2
    return LossValue(
        value,
        {"stage2": float(value.detach()), "stage2_orig": float(orig.detach()), "stage2_recon": float(recon.detach())},
    )


# ---------------------------------------------------------------------------
# hard metrics


def dice_coefficient(pred: np.ndarray, gt: np.ndarray, n_classes: int = N_CLASSES) -> tuple[np.ndarray, float]:
    """Per-foreground-class hard DSC and their mean. Empty in both -> 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise dc.DimensionError(f"dice_coefficient: shape mismatch {pred.shape} vs {gt.shape}")
    scores = np.empty(n_classes - 1)
    for c in range(1, n_classes):
        p = pred == c
        g = gt == c
        total = int(p.sum()) + int(g.sum())
        scores[c - 1] = 1.0 if total == 0 else 2.0 * int(np.logical_and(p, g).sum()) / total
    return scores, float(scores.mean())


def ci95(values: Sequence[float]) -> tuple[float, float, float]:
    """Normal-approximation interval mean +/- 1.96 sd / sqrt(n), sample sd."""
    a = np.asarray(values, dtype=np.float64)
    if a.size < 2:
        raise StatisticsError(f"ci95 needs at least 2 values, got {a.size}")
    mean = float(a.mean())
    half = 1.96 * float(a.std(ddof=1)) / math.sqrt(a.size)
    return mean, mean - half, mean + half


def _betacf(a: float, b: float, x: float, max_iter: int = 300, tol: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise StatisticsError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on d = a - b. Returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise StatisticsError(f"paired_t_test needs equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise StatisticsError(f"paired_t_test needs n >= 2, got {n}")
    d = a - b
    if not np.any(d):
        raise StatisticsError("all paired differences are zero; variance is degenerate")
    sd = float(d.std(ddof=1))
    # rounding in a - b leaves ~1 ulp of spread on an exactly constant shift
    if sd <= 1e-12 * max(1.0, float(np.abs(d).max())):
        raise StatisticsError("paired differences are constant; variance is degenerate")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return t, t_sf_two_sided(t, n - 1)


# ---------------------------------------------------------------------------
# reports


@dataclass
class DiceReport:
    per_class: np.ndarray  # (6,) mean over images
    overall: float
    per_image: list[float]
    ci95: tuple[float, float]
    n_images: int
    per_class_ci95: list[tuple[float, float]]

    @classmethod
    def from_images(cls, per_image_class: np.ndarray) -> "DiceReport":
        """Aggregate an (n_images, 6) array of per-image class DSC."""
        arr = np.asarray(per_image_class, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise StatisticsError(f"need a non-empty (n_images, classes) array, got shape {arr.shape}")
        per_image = arr.mean(axis=1)
        n = arr.shape[0]

        def interval(col: np.ndarray) -> tuple[float, float]:
            if n < 2:
                m = float(col.mean())
                return m, m
            _, lo, hi = ci95(col)
            return lo, hi

        return cls(
            per_class=arr.mean(axis=0),
            overall=float(per_image.mean()),
            per_image=[float(v) for v in per_image],
            ci95=interval(per_image),
            n_images=n,
            per_class_ci95=[interval(arr[:, c]) for c in range(arr.shape[1])],
        )

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = [(name, float(v), lo, hi) for name, v, (lo, hi) in zip(LAYER_NAMES, self.per_class, self.per_class_ci95)]
        out.append(("Overall", self.overall, *self.ci95))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dsc", "ci95_lo", "ci95_hi"])
        for name, v, lo, hi in self.rows():
            w.writerow([name, repr(v), repr(lo), repr(hi)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "per_class": {name: float(v) for name, v in zip(LAYER_NAMES, self.per_class)},
            "per_class_ci95": {name: list(ci) for name, ci in zip(LAYER_NAMES, self.per_class_ci95)},
            "overall": self.overall,
            "ci95": list(self.ci95),
            "n_images": self.n_images,
            "per_image": self.per_image,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"
