"""Command-line entry point: ``grnplus <command> ...``.

Exit codes: 0 success / passing verdict, 1 failing verdict, 2 usage error,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import statistics
import sys
from pathlib import Path

import torch

from . import infer, phantom, rng
from .models import (
    CheckpointError,
    GeneratorConfig,
    ModelConfigError,
    SegmentorConfig,
    build_generator,
    build_segmentor,
    load_checkpoint,
    param_count,
)
from .objectives import DataError
from .tensorfile import ContainerError
from .trainer import DESK_GENERATOR, DESK_SEGMENTOR, TrainConfig, TrainConfigError, run_training

log = logging.getLogger("grnplus")

REFERENCE_SEGMENTOR_PARAMS = 661_727
REFERENCE_GENERATOR_PARAMS = 3_789_025
REFERENCE_COMBINED_PARAMS = 4_450_752


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"--config {path}: top level must be an object")
    return data


def _write_snapshot(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": resolved}
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _split_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(p) for p in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--split: cannot parse {text!r} as three comma-separated numbers") from exc
    if len(parts) != 3:
        raise UsageError(f"--split: need exactly three fractions, got {len(parts)}")
    if any(p < 0 for p in parts):
        raise UsageError("--split: fractions must be nonnegative")
    if abs(sum(parts) - 1.0) > 1e-6:
        raise UsageError(f"--split: fractions must sum to 1 (got {sum(parts):.6g})")
    return parts


def train_config_from_args(args, base: dict) -> TrainConfig:
    d = dict(base)
    preset = d.pop("preset", None)
    if getattr(args, "preset", None):
        preset = args.preset
    if preset == "desk":
        d.setdefault("segmentor", {**_cfg_fields(DESK_SEGMENTOR)})
        d.setdefault("generator", {**_cfg_fields(DESK_GENERATOR)})
    elif preset not in (None, "full"):
        raise UsageError(f"unknown preset {preset!r} (expected 'full' or 'desk')")
    overrides = {
        "mode": getattr(args, "mode", None),
        "labeled_fraction": getattr(args, "labeled_fraction", None),
        "seed": getattr(args, "seed", None),
        "max_epochs": getattr(args, "epochs", None),
        "lr": getattr(args, "lr", None),
        "batch": getattr(args, "batch", None),
        "patience": getattr(args, "patience", None),
        "clip": getattr(args, "clip", None),
    }
    if getattr(args, "paper_epochs", False):
        overrides["max_epochs"] = 50
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    if "max_epochs" in d and d["max_epochs"] < 1:
        raise UsageError("--epochs must be >= 1")
    if "labeled_fraction" in d and not 0 < d["labeled_fraction"] <= 1:
        raise UsageError(f"--labeled-fraction must be in (0, 1], got {d['labeled_fraction']}")
    try:
        return TrainConfig.from_dict(d)
    except (TrainConfigError, ModelConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _cfg_fields(cfg) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def _load_manifest(path: str) -> phantom.DatasetManifest:
    try:
        return phantom.DatasetManifest.load(path)
    except FileNotFoundError as exc:
        raise OSError(f"manifest not found: {exc.filename or path}") from exc
    except (ContainerError, KeyError, ValueError) as exc:
        raise OSError(f"cannot load dataset at {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    base = _read_config(args.config)
    spec = phantom.PhantomSpec.from_dict(base.get("phantom", {}))
    overrides = {}
    if args.height is not None:
        overrides["height"] = args.height
    if args.width is not None:
        overrides["width"] = args.width
    if overrides:
        spec = phantom.PhantomSpec.from_dict({**spec.to_dict(), **overrides})
    try:
        spec.validate()
    except phantom.PhantomConfigError as exc:
        raise UsageError(str(exc)) from exc
    fractions = _split_fractions(args.split)
    for flag, v in (("--subjects", args.subjects), ("--scans", args.scans), ("--slices", args.slices)):
        if v < 1:
            raise UsageError(f"{flag} must be >= 1")
    if args.subjects < 3:
        raise UsageError("--subjects must be >= 3 so that every split gets a subject")
    try:
        phantom._split_counts(args.subjects, fractions)
    except ValueError as exc:
        raise UsageError(f"--split: {exc}") from exc
    out = Path(args.out)
    manifest = phantom.generate_dataset(out, spec, args.subjects, args.scans, args.slices, fractions, args.seed)
    resolved = {
        "phantom": spec.to_dict(),
        "subjects": args.subjects,
        "scans": args.scans,
        "slices": args.slices,
        "split": list(fractions),
        "seed": args.seed,
    }
    _write_snapshot(out, "gen-data", resolved)
    for split in phantom.SPLITS:
        print(f"{split}: {len(manifest.subjects(split))} subjects, {len(manifest.split(split))} slices")
    return 0


def _write_run(out: Path, result) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.grnt").write_bytes(result.checkpoint_bytes())
    (out / "history.csv").write_text(result.history.epochs_csv(), encoding="utf-8")
    (out / "history.json").write_text(result.history.to_json(), encoding="utf-8")
    (out / "grad_norms.csv").write_text(result.history.grad_norms_csv(), encoding="utf-8")


def cmd_train(args) -> int:
    cfg = train_config_from_args(args, _read_config(args.config))
    manifest = _load_manifest(args.data)
    out = Path(args.out)
    _write_snapshot(out, "train", {**cfg.to_dict(), "data": str(args.data)})
    result = run_training(cfg, manifest)
    _write_run(out, result)
    h = result.history
    print(f"best epoch {h.best_epoch} val_loss {h.best_val_loss!r} ({h.stop_reason}); nan events {h.nan_events}")
    return 1 if h.failed else 0


def _load_models(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise OSError(f"checkpoint not found: {path}") from exc


def cmd_eval(args) -> int:
    models = _load_models(args.checkpoint)
    manifest = _load_manifest(args.data)
    mode = "sge" if args.sge else "vanilla"
    ev = infer.evaluate(models, manifest, args.split, mode, timing_batches=args.timing_batches)
    out = Path(args.report)
    _write_snapshot(out, "eval", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split, "mode": mode})
    (out / f"dice_{args.split}_{mode}.csv").write_text(ev.report.to_csv(), encoding="utf-8")
    (out / f"dice_{args.split}_{mode}.json").write_text(ev.report.to_json(), encoding="utf-8")
    (out / f"timing_{args.split}_{mode}.json").write_text(json.dumps(ev.timing, indent=1) + "\n", encoding="utf-8")
    for name, v, lo, hi in ev.report.rows():
        print(f"{name:>22s}  {100 * v:6.2f} ({100 * lo:.2f}, {100 * hi:.2f})")
    if ev.timing:
        print(f"median batch time {ev.timing['median_batch_s']:.4f} s")
    return 0


def cmd_infer(args) -> int:
    models = _load_models(args.checkpoint)
    manifest = _load_manifest(args.data)
    mode = "sge" if args.sge else "vanilla"
    out = Path(args.out)
    _write_snapshot(out, "infer", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split, "mode": mode})
    ev = infer.evaluate(models, manifest, args.split, mode, timing_batches=0, export_dir=out)
    from . import tensorfile

    for rec in ev.records:
        tensorfile.write(out / f"{rec.image_id}_{mode}_mask.grnt", {"mask": rec.mask})
    print(f"wrote {len(ev.records)} predictions to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    result = run_gradcheck(seed=args.seed, samples=args.samples, eps=args.eps)
    worst = result.worst
    print(
        f"checked {len(result.samples)} coordinates over {len(result.tensors_covered())} tensors "
        f"({result.skipped_nonsmooth} nonsmooth draws skipped, {result.reduced_steps} with a reduced step); "
        f"max relative error {result.max_rel_error:.3e} at {worst.name}[{worst.index}]"
    )
    if result.max_rel_error < args.tolerance:
        return 0
    print(
        f"FAIL: {worst.name}[{worst.index}] analytic {worst.analytic!r} vs finite-difference {worst.numeric!r} "
        f"exceeds tolerance {args.tolerance:g}"
    )
    return 1


def verdict(multi: list[float], single: list[float]) -> tuple[str, float, float]:
    m, s = statistics.median(multi), statistics.median(single)
    if m == s:
        return "tie", m, s
    return ("multi" if m < s else "single"), m, s


def cmd_ablate(args) -> int:
    base = _read_config(args.config)
    manifest = _load_manifest(args.data)
    out = Path(args.out)
    seeds = list(range(args.seed, args.seed + args.seeds))
    arms = (("multi", "grn_plus"), ("single", "grn_plus_single_stage"))
    cfg0 = train_config_from_args(args, base)
    _write_snapshot(out, "ablate", {**cfg0.to_dict(), "seeds": seeds, "data": str(args.data)})
    rows = []
    finals: dict[str, list[float]] = {"multi": [], "single": []}
    for seed in seeds:
        for arm, mode in arms:
            cfg = TrainConfig.from_dict({**cfg0.to_dict(), "mode": mode, "seed": seed})
            result = run_training(cfg, manifest)
            _write_run(out / f"seed{seed}_{arm}", result)
            for e in result.history.epochs:
                rows.append([seed, arm, e["epoch"], e.get("train_loss"), e["val_loss"], e["nan_events"]])
            finals[arm].append(result.history.final_val_loss)
            print(f"seed {seed} {arm}: final val loss {result.history.final_val_loss:.6f}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "arm", "epoch", "train_loss", "val_loss", "nan_events"])
    for r in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in r])
    (out / "ablation_curves.csv").write_text(buf.getvalue(), encoding="utf-8")
    winner, m, s = verdict(finals["multi"], finals["single"])
    line = f"verdict: {winner} (median final val loss multi={m:.6f} single={s:.6f})"
    (out / "verdict.txt").write_text(line + "\n", encoding="utf-8")
    print(line)
    return 0 if winner in ("multi", "tie") else 1


def parameter_report() -> dict:
    s = param_count(build_segmentor(SegmentorConfig()))
    g = param_count(build_generator(GeneratorConfig()))
    return {
        "segmentor": s,
        "generator": g,
        "combined": s + g,
        "reference_segmentor": REFERENCE_SEGMENTOR_PARAMS,
        "reference_generator": REFERENCE_GENERATOR_PARAMS,
        "reference_combined": REFERENCE_COMBINED_PARAMS,
    }


def cmd_report(args) -> int:
    counts = parameter_report()
    if counts["combined"] != counts["segmentor"] + counts["generator"]:
        print("combined parameter count is inconsistent", file=sys.stderr)
        return 1
    print(f"{'model':<10s} {'this build':>12s} {'reference':>12s} {'ratio':>7s}")
    for key in ("segmentor", "generator", "combined"):
        ours, ref = counts[key], counts[f"reference_{key}"]
        print(f"{key:<10s} {ours:>12,d} {ref:>12,d} {ours / ref:7.3f}")
    if args.run:
        run = Path(args.run)
        for path in sorted(run.glob("dice_*.json")):
            d = json.loads(path.read_text(encoding="utf-8"))
            lo, hi = d["ci95"]
            print(f"{path.stem}: overall {100 * d['overall']:.2f} ({100 * lo:.2f}, {100 * hi:.2f}), n={d['n_images']}")
        hist = run / "history.json"
        if hist.exists():
            h = json.loads(hist.read_text(encoding="utf-8"))
            print(f"training: best epoch {h['best_epoch']} val loss {h['best_val_loss']}, {h['stop_reason']}")
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="grnplus", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, default=16)
    g.add_argument("--scans", type=int, default=2)
    g.add_argument("--slices", type=int, default=8)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="0.625,0.125,0.25", help="train,val,test subject fractions")
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    def training_flags(q, with_mode=True):
        q.add_argument("--data", required=True, help="dataset directory or manifest.json")
        if with_mode:
            q.add_argument("--mode", choices=("grn+", "grn+single", "supervised"))
            q.add_argument("--labeled-fraction", type=float)
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--paper-epochs", action="store_true", help="train up to 50 epochs")
        q.add_argument("--lr", type=float)
        q.add_argument("--batch", type=int)
        q.add_argument("--patience", type=int)
        q.add_argument("--clip", type=float, help="gradient norm cap (off by default)")
        q.add_argument("--preset", choices=("full", "desk"), help="backbone widths")
        q.add_argument("--config")
        q.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one configuration")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="DSC report for a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=phantom.SPLITS)
    e.add_argument("--sge", dest="sge", action="store_true", default=False)
    e.add_argument("--no-sge", dest="sge", action="store_false")
    e.add_argument("--timing-batches", type=int, default=20)
    e.add_argument("--report", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="export predicted masks and enhanced images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split", default="test", choices=phantom.SPLITS)
    i.add_argument("--sge", dest="sge", action="store_true", default=False)
    i.add_argument("--no-sge", dest="sge", action="store_false")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference check of the toy generator+segmentor")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--samples", type=int, default=100)
    c.add_argument("--eps", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="matched-seed multi-stage vs single-stage runs")
    training_flags(a, with_mode=False)
    a.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")
    a.set_defaults(func=cmd_ablate, seed=0)

    r = sub.add_parser("report", help="parameter-count calibration and run summaries")
    r.add_argument("--run", help="directory with eval/train outputs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
