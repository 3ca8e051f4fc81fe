import dataclasses
import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grnplus import phantom as P
from grnplus import rng as R


def noise_free(**kw):
    return dataclasses.replace(
        P.PhantomSpec(), speckle_shape=None, attenuation_per_px=0.0, occlusion=None, slice_jitter=0.0, **kw
    )


@st.composite
def specs(draw):
    amp = draw(st.floats(0.0, 3.0))
    ranges = []
    for lo, hi in P.PhantomSpec().layer_thickness_range:
        a = draw(st.floats(2.0, lo))
        ranges.append((a, draw(st.floats(a, hi))))
    return dataclasses.replace(
        P.PhantomSpec(),
        waviness=P.Waviness(amp, draw(st.integers(0, 4)), (0.5, draw(st.floats(0.5, 4.0)))),
        layer_thickness_range=tuple(ranges),
        width=draw(st.integers(1, 96)),
    )


def test_zero_amplitude_gives_flat_curves():
    spec = noise_free(waviness=P.Waviness(amplitude=0.0))
    curves = P.sample_boundaries(spec, np.random.default_rng(3))
    assert curves.shape == (7, spec.width)
    assert np.all(curves == curves[:, :1])


def test_boundaries_never_cross_over_many_draws():
    # default spec, 1000 independent subjects, including per-slice jitter
    spec = P.PhantomSpec()
    for seed in range(1000):
        r = R.numpy_rng(seed, "test")
        a = P.sample_anatomy(spec, r)
        c = P.boundaries_from_anatomy(spec, a, r, phase_shift=float(seed))
        assert np.all(np.diff(c, axis=0) > 0), seed


@settings(max_examples=300, deadline=None)
@given(specs(), st.integers(0, 2**32 - 1))
def test_boundaries_never_cross_for_random_specs(spec, seed):
    c = P.sample_boundaries(spec, np.random.default_rng(seed))
    assert np.all(np.diff(c, axis=0) > 0)
    assert c.min() >= 1.0 and c.max() <= spec.height - 2.0


def test_sampling_is_deterministic():
    spec = P.PhantomSpec()
    a = P.sample_boundaries(spec, np.random.default_rng(11))
    b = P.sample_boundaries(spec, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)
    ia, ma = P.render_phantom(spec, np.random.default_rng(5))
    ib, mb = P.render_phantom(spec, np.random.default_rng(5))
    assert ia.tobytes() == ib.tobytes() and ma.tobytes() == mb.tobytes()


def test_mask_follows_boundaries_by_brute_force():
    spec = P.PhantomSpec(height=64, width=9)
    spec = dataclasses.replace(
        spec,
        waviness=P.Waviness(amplitude=1.5),
        top_margin_range=(4.0, 5.0),
        layer_thickness_range=((3.0, 4.0),) * 5 + ((10.0, 12.0),),
    )
    curves = P.sample_boundaries(spec, np.random.default_rng(0))
    mask = P.mask_from_boundaries(curves, spec.height)
    for r in range(spec.height):
        for c in range(spec.width):
            b = curves[:, c]
            if r < b[0] or r >= b[6]:
                want = 0
            else:
                want = next(i for i in range(1, 7) if b[i - 1] <= r < b[i])
            assert mask[r, c] == want


def test_noise_free_image_is_piecewise_constant_at_layer_means():
    spec = noise_free()
    image, mask = P.render_phantom(spec, np.random.default_rng(1))
    means = np.array((spec.background_intensity, *spec.layer_intensity_means), dtype=np.float32)
    np.testing.assert_array_equal(image, means[mask])
    for c in range(1, 7):
        assert np.all(image[mask == c] == means[c])


def test_partition_and_range():
    image, mask, occ = P.render_phantom(P.PhantomSpec(), np.random.default_rng(2), return_occlusion=True)
    counts = np.bincount(mask.ravel(), minlength=7)
    assert counts.sum() == image.size and set(np.unique(mask)) <= set(range(7))
    assert image.dtype == np.float32 and image.min() >= 0 and image.max() <= 1
    assert occ.shape == image.shape and occ.any()


def test_occlusion_darkens_pixels():
    spec = dataclasses.replace(noise_free(), occlusion=P.Occlusion(count_range=(2, 2), darkness=0.25))
    rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
    img, mask, occ = P.render_phantom(spec, rng_a, return_occlusion=True)
    clean, _ = P.render_phantom(noise_free(), rng_b)
    occ = occ.astype(bool)
    np.testing.assert_allclose(img[occ], 0.25 * clean[occ], rtol=1e-6)
    np.testing.assert_array_equal(img[~occ], clean[~occ])


@pytest.mark.parametrize(
    "change, match",
    [
        (dict(height=40), "do not fit"),
        (dict(layer_intensity_means=(0.5,) * 5 + (1.5,)), r"\[0, 1\]"),
        (dict(occlusion=P.Occlusion(darkness=1.0)), "darkness"),
        (dict(speckle_shape=0.0), "speckle"),
        (dict(layer_thickness_range=((1.0, 3.0),) * 6), "thickness"),
    ],
)
def test_invalid_specs(change, match):
    with pytest.raises(P.PhantomConfigError, match=match):
        dataclasses.replace(P.PhantomSpec(), **change).validate()


def test_spec_dict_round_trip_and_unknown_keys():
    spec = P.PhantomSpec()
    assert P.PhantomSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(P.PhantomConfigError, match="unknown"):
        P.PhantomSpec.from_dict({"heigth": 12})


def _small_spec():
    return dataclasses.replace(
        P.PhantomSpec(height=64, width=32),
        top_margin_range=(6.0, 8.0),
        layer_thickness_range=((3.0, 5.0), (5.0, 8.0), (2.0, 3.0), (5.0, 7.0), (2.0, 3.0), (10.0, 14.0)),
        occlusion=P.Occlusion(radius_range=(3.0, 6.0)),
    )


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_counts_splits_and_determinism(tmp_path):
    m = P.generate_dataset(tmp_path / "a", _small_spec(), 10, 2, 8, (0.6, 0.2, 0.2), seed=7)
    assert len(m.entries) == 160
    sets = {s: set(m.subjects(s)) for s in P.SPLITS}
    assert [len(sets[s]) for s in P.SPLITS] == [6, 2, 2]
    assert not (sets["train"] & sets["val"] or sets["train"] & sets["test"] or sets["val"] & sets["test"])
    P.generate_dataset(tmp_path / "b", _small_spec(), 10, 2, 8, (0.6, 0.2, 0.2), seed=7)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    loaded = P.DatasetManifest.load(tmp_path / "a")
    assert loaded.entries == m.entries
    img, mask, occ = loaded.load_sample(loaded.entries[0])
    assert img.shape == mask.shape == occ.shape == (64, 32)


def test_slices_of_a_subject_correlate(tmp_path):
    m = P.generate_dataset(tmp_path, _small_spec(), 3, 1, 2, (1 / 3, 1 / 3, 1 / 3), seed=1)
    masks = {e.subject_id + str(e.slice_id): m.load_sample(e)[1] for e in m.entries}
    same = np.mean(masks["S0000"] == masks["S0001"])
    other = np.mean(masks["S0000"] == masks["S0010"])
    assert same > other


def test_one_subject_per_split(tmp_path):
    m = P.generate_dataset(tmp_path, _small_spec(), 3, 1, 1, (1 / 3, 1 / 3, 1 / 3), seed=0)
    assert [len(m.subjects(s)) for s in P.SPLITS] == [1, 1, 1]


def test_infeasible_split_and_bad_fractions(tmp_path):
    with pytest.raises(ValueError, match="infeasible"):
        P.generate_dataset(tmp_path, _small_spec(), 3, 1, 1, (0.9, 0.1, 0.0), seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        P.generate_dataset(tmp_path, _small_spec(), 5, 1, 1, (0.5, 0.5, 0.5), seed=0)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        P.generate_dataset(blocker / "sub", _small_spec(), 3, 1, 1, (1 / 3, 1 / 3, 1 / 3), seed=0)


def _fake_manifest(n_train):
    entries = [P.ManifestEntry(f"T{i:02d}", "c", k, "", "", "train", True) for i in range(n_train) for k in range(2)]
    entries.append(P.ManifestEntry("V", "c", 0, "", "", "val", True))
    return P.DatasetManifest(entries, 0, {})


def test_labeled_subset_ceiling_and_minimum():
    m = _fake_manifest(20)
    sub = P.select_labeled_subset(m, 0.05, seed=3)
    assert len(sub.subjects("train", labeled=True)) == 1
    for frac, want in [(0.1, 2), (0.2, 4), (0.15, 3), (0.11, 3), (1.0, 20)]:
        assert len(P.select_labeled_subset(m, frac, 0).subjects("train", labeled=True)) == want
    assert len(P.select_labeled_subset(_fake_manifest(10), 0.05, 0).subjects("train", labeled=True)) == 1


def test_labeled_subset_is_subject_level_and_deterministic():
    m = _fake_manifest(10)
    a = P.select_labeled_subset(m, 0.3, seed=9)
    b = P.select_labeled_subset(m, 0.3, seed=9)
    assert a.entries == b.entries
    lab, unlab = set(a.subjects("train", True)), set(a.subjects("train", False))
    assert len(lab) == 3 and not lab & unlab
    assert all(e.labeled for e in a.entries if e.split == "val")
    with pytest.raises(ValueError):
        P.select_labeled_subset(m, 0.0, 0)
    with pytest.raises(ValueError):
        P.select_labeled_subset(m, 1.5, 0)


def test_manifest_validation_catches_leakage():
    m = _fake_manifest(2)
    m.entries.append(P.ManifestEntry("T00", "c", 5, "", "", "test", True))
    with pytest.raises(ValueError, match="both"):
        m.validate(check_files=False)
    m = _fake_manifest(2)
    m.entries[-1].labeled = False
    with pytest.raises(ValueError, match="labeled"):
        m.validate(check_files=False)


def test_pgm_export(tmp_path):
    a = np.array([[0.0, 0.5], [1.0, 2.0], [0.2, -1.0]])
    P.write_pgm(tmp_path / "x.pgm", a)
    raw = (tmp_path / "x.pgm").read_bytes()
    assert raw == b"P5\n2 3\n255\n" + bytes([0, 128, 255, 255, 51, 0])
    P.write_pgm(tmp_path / "m.pgm", np.array([[0, 6]]), scale=36)
    assert (tmp_path / "m.pgm").read_bytes().endswith(bytes([0, 216]))
