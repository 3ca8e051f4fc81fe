"""Synthetic layered-tissue phantoms and subject-level dataset manifests.

Each phantom is a stack of six tissue layers (dermis, superficial fat, SFM,
deep fat, DFM, muscle) between wavy boundaries, degraded by multiplicative
gamma speckle, exponential depth attenuation and dark elliptical occlusions.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from . import tensorfile

N_LAYERS = 6
N_CLASSES = N_LAYERS + 1
LAYER_NAMES = ("Dermis", "Superficial Fat Layer", "SFM", "Deep Fat", "DFM", "Muscle")
SPLITS = ("train", "val", "test")


class PhantomConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Waviness:
    amplitude: float = 3.0
    n_sinusoids: int = 2
    freq_range: tuple[float, float] = (0.5, 2.0)


@dataclass(frozen=True)
class Occlusion:
    count_range: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (8.0, 20.0)
    darkness: float = 0.25


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 128
    width: int = 128
    waviness: Waviness = field(default_factory=Waviness)
    # (lo, hi) thickness in px for each of the six layers, top to bottom
    layer_thickness_range: tuple[tuple[float, float], ...] = (
        (6.0, 10.0),
        (12.0, 20.0),
        (4.0, 7.0),
        (10.0, 18.0),
        (4.0, 7.0),
        (28.0, 40.0),
    )
    top_margin_range: tuple[float, float] = (6.0, 14.0)
    layer_intensity_means: tuple[float, ...] = (0.75, 0.30, 0.85, 0.35, 0.90, 0.50)
    background_intensity: float = 0.05
    # None disables speckle
    speckle_shape: float | None = 4.0
    attenuation_per_px: float = 0.008
    occlusion: Occlusion | None = field(default_factory=Occlusion)
    # per-slice boundary jitter within a subject, px
    slice_jitter: float = 0.5

    def validate(self) -> None:
        if self.height < 8 or self.width < 1:
            raise PhantomConfigError(f"image too small: {self.height}x{self.width}")
        if len(self.layer_thickness_range) != N_LAYERS:
            raise PhantomConfigError(f"need {N_LAYERS} thickness ranges, got {len(self.layer_thickness_range)}")
        if len(self.layer_intensity_means) != N_LAYERS:
            raise PhantomConfigError(f"need {N_LAYERS} intensity means, got {len(self.layer_intensity_means)}")
        for i, (lo, hi) in enumerate(self.layer_thickness_range):
            if not 2.0 <= lo <= hi:
                raise PhantomConfigError(f"layer {i}: thickness range ({lo}, {hi}) must satisfy 2 <= lo <= hi")
        if not all(0.0 <= m <= 1.0 for m in (*self.layer_intensity_means, self.background_intensity)):
            raise PhantomConfigError("intensity means must lie in [0, 1]")
        if self.speckle_shape is not None and self.speckle_shape <= 0:
            raise PhantomConfigError("speckle_shape must be positive")
        if self.attenuation_per_px < 0:
            raise PhantomConfigError("attenuation_per_px must be >= 0")
        w = self.waviness
        if w.amplitude < 0 or w.n_sinusoids < 0 or not 0 <= w.freq_range[0] <= w.freq_range[1]:
            raise PhantomConfigError(f"invalid waviness {w}")
        if self.occlusion is not None:
            o = self.occlusion
            if not 0 <= o.count_range[0] <= o.count_range[1]:
                raise PhantomConfigError(f"invalid occlusion count range {o.count_range}")
            if not 0 < o.radius_range[0] <= o.radius_range[1]:
                raise PhantomConfigError(f"invalid occlusion radius range {o.radius_range}")
            if not 0.0 <= o.darkness < 1.0:
                raise PhantomConfigError("occlusion darkness must lie in [0, 1)")
        lo_top, hi_top = self.top_margin_range
        # worst-case excursion: shared wave amplitude scaled by at most 1.5, plus slice jitter
        swing = 1.5 * w.amplitude + self.slice_jitter
        if lo_top - swing < 1.0:
            raise PhantomConfigError(
                f"top margin {lo_top} too small for boundary swing {swing:.2f} (needs >= {1 + swing:.2f})"
            )
        deepest = hi_top + sum(hi for _, hi in self.layer_thickness_range) + N_LAYERS * self.slice_jitter + swing
        if deepest > self.height - 2:
            raise PhantomConfigError(
                f"layers do not fit: deepest boundary can reach {deepest:.1f} px but height is {self.height}"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PhantomConfigError(f"unknown phantom keys: {sorted(unknown)}")
        if "waviness" in d:
            wv = dict(d["waviness"])
            wv["freq_range"] = tuple(wv.get("freq_range", Waviness.freq_range))
            d["waviness"] = Waviness(**wv)
        if d.get("occlusion") is not None:
            oc = dict(d["occlusion"])
            for k in ("count_range", "radius_range"):
                if k in oc:
                    oc[k] = tuple(oc[k])
            d["occlusion"] = Occlusion(**oc)
        for k in ("top_margin_range", "layer_intensity_means"):
            if k in d:
                d[k] = tuple(d[k])
        if "layer_thickness_range" in d:
            d["layer_thickness_range"] = tuple(tuple(r) for r in d["layer_thickness_range"])
        return cls(**d)


@dataclass(frozen=True)
class Anatomy:
    """Subject-level draw: depths, shared wave, per-boundary amplitude scale."""

    top: float
    thickness: np.ndarray  # (6,)
    freqs: np.ndarray  # (n_sinusoids,)
    phases: np.ndarray
    amps: np.ndarray
    scales: np.ndarray  # (7,) per-boundary amplitude multiplier
    intensity_gain: float


def sample_anatomy(spec: PhantomSpec, rng: np.random.Generator) -> Anatomy:
    spec.validate()
    w = spec.waviness
    top = rng.uniform(*spec.top_margin_range)
    thickness = np.array([rng.uniform(lo, hi) for lo, hi in spec.layer_thickness_range])
    freqs = rng.uniform(*w.freq_range, size=w.n_sinusoids)
    phases = rng.uniform(0.0, 2 * math.pi, size=w.n_sinusoids)
    # amplitudes sum to the configured peak swing
    raw = rng.uniform(0.5, 1.0, size=w.n_sinusoids)
    amps = w.amplitude * raw / raw.sum() if w.n_sinusoids else raw
    # Adjacent boundary scales differ by at most (t - 1) / (2 A), so the wave
    # difference between neighbours never exceeds half the layer thickness.
    scales = np.empty(N_LAYERS + 1)
    scales[0] = rng.uniform(0.75, 1.25)
    for i in range(N_LAYERS):
        if w.amplitude == 0:
            step = 0.0
        elif thickness[i] - 1.0 >= 0.5 * w.amplitude:
            step = 0.25
        else:
            step = (thickness[i] - 1.0) / (2.0 * w.amplitude)
        scales[i + 1] = np.clip(scales[i] + rng.uniform(-step, step), 0.5, 1.5)
    return Anatomy(top, thickness, freqs, phases, amps, scales, float(rng.uniform(0.9, 1.1)))


def boundaries_from_anatomy(
    spec: PhantomSpec, anatomy: Anatomy, rng: np.random.Generator | None = None, phase_shift: float = 0.0
) -> np.ndarray:
    """Seven (width,) boundary curves in px; optional per-slice jitter from ``rng``."""
    thickness = anatomy.thickness
    top = anatomy.top
    if rng is not None and spec.slice_jitter > 0:
        j = spec.slice_jitter
        top = top + rng.uniform(-j, j)
        thickness = np.maximum(thickness + rng.uniform(-j, j, size=N_LAYERS), 2.0)
    base = top + np.concatenate([[0.0], np.cumsum(thickness)])
    cols = np.arange(spec.width, dtype=np.float64)
    wave = np.zeros(spec.width)
    for f, ph, a in zip(anatomy.freqs, anatomy.phases, anatomy.amps):
        wave += a * np.sin(2 * math.pi * f * cols / spec.width + ph + phase_shift)
    curves = base[:, None] + anatomy.scales[:, None] * wave[None, :]
    return np.clip(curves, 1.0, spec.height - 2.0)


def sample_boundaries(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a fresh anatomy and return its (7, width) boundary depths."""
    return boundaries_from_anatomy(spec, sample_anatomy(spec, rng))


def mask_from_boundaries(curves: np.ndarray, height: int) -> np.ndarray:
    depth = np.arange(height, dtype=np.float64)[:, None]
    # number of boundaries at or above each pixel
    count = np.zeros((height, curves.shape[1]), dtype=np.int64)
    for c in curves:
        count += depth >= c[None, :]
    mask = count.astype(np.uint8)
    mask[count >= len(curves)] = 0
    return mask


def _occlusion_map(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    occ = np.zeros((spec.height, spec.width), dtype=bool)
    o = spec.occlusion
    if o is None:
        return occ
    n = int(rng.integers(o.count_range[0], o.count_range[1] + 1))
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    for _ in range(n):
        cy = rng.uniform(0, spec.height)
        cx = rng.uniform(0, spec.width)
        ry, rx = rng.uniform(*o.radius_range, size=2)
        occ |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return occ


def render_from_boundaries(
    spec: PhantomSpec,
    curves: np.ndarray,
    rng: np.random.Generator,
    intensity_gain: float = 1.0,
    return_occlusion: bool = False,
):
    mask = mask_from_boundaries(curves, spec.height)
    means = np.array([spec.background_intensity, *spec.layer_intensity_means]) * intensity_gain
    image = means[mask]
    if spec.speckle_shape is not None:
        k = spec.speckle_shape
        image = image * rng.gamma(k, 1.0 / k, size=image.shape)
    if spec.attenuation_per_px > 0:
        depth = np.arange(spec.height, dtype=np.float64)[:, None]
        image = image * np.exp(-spec.attenuation_per_px * depth)
    occ = _occlusion_map(spec, rng)
    if spec.occlusion is not None:
        image = np.where(occ, image * spec.occlusion.darkness, image)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if return_occlusion:
        return image, mask, occ.astype(np.uint8)
    return image, mask


def render_phantom(spec: PhantomSpec, rng: np.random.Generator, return_occlusion: bool = False):
    """Render one phantom. Returns (image float32 in [0,1], mask uint8 in 0..6).

    With ``return_occlusion`` a third uint8 map marks the occluded pixels.
    """
    anatomy = sample_anatomy(spec, rng)
    curves = boundaries_from_anatomy(spec, anatomy)
    return render_from_boundaries(spec, curves, rng, 1.0, return_occlusion)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ManifestEntry:
    subject_id: str
    scan_id: str
    slice_id: int
    image_path: str
    mask_path: str
    split: str
    labeled: bool


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    generation_seed: int
    spec: dict
    root: Path = field(default=Path("."), compare=False)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def subjects(self, split: str, labeled: bool | None = None) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            if e.split == split and (labeled is None or e.labeled == labeled):
                seen.setdefault(e.subject_id)
        return list(seen)

    def to_json(self) -> str:
        payload = {
            "generation_seed": self.generation_seed,
            "spec": self.spec,
            "entries": [dataclasses.asdict(e) for e in self.entries],
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        raw = json.loads(path.read_text(encoding="utf-8"))
        manifest = cls(
            entries=[ManifestEntry(**e) for e in raw["entries"]],
            generation_seed=raw["generation_seed"],
            spec=raw["spec"],
            root=path.parent,
        )
        manifest.validate(check_files=check_files)
        return manifest

    def validate(self, check_files: bool = True) -> None:
        owner: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"entry {e.image_path}: unknown split {e.split!r}")
            prev = owner.setdefault(e.subject_id, e.split)
            if prev != e.split:
                raise ValueError(f"subject {e.subject_id} appears in both {prev} and {e.split}")
            if e.split != "train" and not e.labeled:
                raise ValueError(f"{e.split} entry {e.image_path} must be labeled")
            if check_files:
                for p in (e.image_path, e.mask_path):
                    tensorfile.read(self.root / p)

    def load_sample(self, entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(image, mask, occlusion) arrays for one entry."""
        img = tensorfile.read(self.root / entry.image_path)
        msk = tensorfile.read(self.root / entry.mask_path)
        return img["image"], msk["mask"], img["occlusion"]


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three nonnegative split fractions, got {list(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must sum to 1 (got {sum(fractions):.6g})")
    quotas = [f * n for f in fractions]
    counts = [math.floor(q + 1e-9) for q in quotas]
    # largest remainder, ties toward the earlier split
    order = sorted(range(3), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    if min(counts) < 1:
        raise ValueError(f"infeasible split: {n} subjects with fractions {list(fractions)} leaves a split empty")
    return counts


def generate_dataset(
    out_dir: str | os.PathLike,
    spec: PhantomSpec,
    n_subjects: int,
    scans_per_subject: int,
    slices_per_scan: int,
    split_fractions: Sequence[float],
    seed: int,
) -> DatasetManifest:
    """Render a subject-structured dataset into ``out_dir`` and write manifest.json."""
    spec.validate()
    if n_subjects < 3:
        raise ValueError(f"need at least 3 subjects, got {n_subjects}")
    if scans_per_subject < 1 or slices_per_scan < 1:
        raise ValueError("scans_per_subject and slices_per_scan must be >= 1")
    counts = _split_counts(n_subjects, split_fractions)

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "samples").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    order = rngmod.numpy_rng(seed, "data", "split").permutation(n_subjects)
    split_of = {}
    for rank, subj in enumerate(order):
        split_of[int(subj)] = "train" if rank < counts[0] else "val" if rank < counts[0] + counts[1] else "test"

    entries = []
    for s in range(n_subjects):
        subject_id = f"S{s:03d}"
        anatomy = sample_anatomy(spec, rngmod.numpy_rng(seed, "data", "anatomy", s))
        for c in range(scans_per_subject):
            scan_id = f"{subject_id}_C{c:02d}"
            scan_phase = rngmod.numpy_rng(seed, "data", "scan", s, c).uniform(0, 2 * math.pi)
            for k in range(slices_per_scan):
                r = rngmod.numpy_rng(seed, "data", "slice", s, c, k)
                curves = boundaries_from_anatomy(spec, anatomy, r, phase_shift=scan_phase + 0.05 * k)
                image, mask, occ = render_from_boundaries(
                    spec, curves, r, anatomy.intensity_gain, return_occlusion=True
                )
                stem = f"samples/{scan_id}_{k:03d}"
                tensorfile.write(out / f"{stem}_image.grnt", {"image": image, "occlusion": occ})
                tensorfile.write(out / f"{stem}_mask.grnt", {"mask": mask})
                entries.append(
                    ManifestEntry(subject_id, scan_id, k, f"{stem}_image.grnt", f"{stem}_mask.grnt", split_of[s], True)
                )
    manifest = DatasetManifest(entries, seed, spec.to_dict(), root=out)
    manifest.save(out / "manifest.json")
    return manifest


def select_labeled_subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep masks for a subject-level fraction of train subjects (ceiling, min 1)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"labeled fraction must be in (0, 1], got {fraction}")
    subjects = sorted(manifest.subjects("train"))
    if not subjects:
        raise ValueError("manifest has no train subjects")
    n = max(1, math.ceil(round(fraction * len(subjects), 9)))
    perm = rngmod.numpy_rng(seed, "labeled").permutation(len(subjects))
    chosen = {subjects[i] for i in perm[:n]}
    entries = [
        dataclasses.replace(e, labeled=(e.subject_id in chosen)) if e.split == "train" else dataclasses.replace(e)
        for e in manifest.entries
    ]
    return DatasetManifest(entries, manifest.generation_seed, manifest.spec, manifest.root)


def write_pgm(path: str | os.PathLike, array: np.ndarray, scale: float = 255.0) -> None:
    """8-bit binary PGM (P5); pixel = round(value * scale) clipped to 0..255."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {a.shape}")
    pix = np.clip(np.rint(a * scale), 0, 255).astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())
