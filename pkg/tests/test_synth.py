from __future__ import annotations

import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from conftest import tiny_config

from robustmil.core import dataset_digest, validate_dataset
from robustmil.errors import ConfigError
from robustmil.probe import ProbeConfig, ProbeSet, probe_accuracy, raw_probe_set, train_scanner_probe
from robustmil.synth import (
    SURROGATE_SCANNER,
    AugmentParams,
    GeneratorConfig,
    ScannerSpec,
    augment_tile,
    generate_cohort,
    hsv_to_rgb,
    rgb_to_hsv,
    sample_augment_params,
    surrogate_pair,
)


def test_same_config_twice_is_byte_identical():
    a = generate_cohort(tiny_config())
    b = generate_cohort(tiny_config())
    assert dataset_digest(a) == dataset_digest(b)


def test_different_seed_changes_patients_but_not_the_world():
    cfg = tiny_config(confound_strength=1.0, noise_sigma=0.0, class_separation=0.0)
    cfg.scanners = [ScannerSpec(s.name, s.offset_scale, 0.0) for s in cfg.scanners]
    c1 = generate_cohort(cfg)
    cfg.seed = 77
    c2 = generate_cohort(cfg)
    assert dataset_digest(c1) != dataset_digest(c2)
    # without noise or gain, paired tiles differ by the scanner offsets only,
    # and those belong to the world shared by both cohorts
    gaps = {}
    for ds in (c1, c2):
        for pr in ds.pairs:
            d = pr.scan_a.features[pr.correspondence[:, 0]] - pr.scan_b.features[pr.correspondence[:, 1]]
            gaps.setdefault((pr.scan_a.scanner_id, pr.scan_b.scanner_id), []).append(d.mean(axis=0))
    for vecs in gaps.values():
        for v in vecs[1:]:
            np.testing.assert_allclose(v, vecs[0], atol=1e-5)


def test_zero_confound_gives_identical_paired_tiles():
    ds = generate_cohort(tiny_config(confound_strength=0.0))
    assert ds.pairs
    for pr in ds.pairs:
        fa = pr.scan_a.features[pr.correspondence[:, 0]]
        fb = pr.scan_b.features[pr.correspondence[:, 1]]
        assert np.array_equal(fa, fb)


def test_pairs_cover_every_scanner_pair_of_a_patient():
    ds = generate_cohort(tiny_config(scans_per_patient=None))
    assert validate_dataset(ds) == []
    per_patient = {}
    for pr in ds.pairs:
        per_patient[pr.patient_id] = per_patient.get(pr.patient_id, 0) + 1
    assert all(v == 3 for v in per_patient.values()) and len(per_patient) == 12


@pytest.mark.parametrize("n", [10, 11, 40, 41])
def test_classes_are_balanced(n):
    ds = generate_cohort(tiny_config(n_patients=n))
    ones = sum(p.class_label for p in ds.patients)
    assert abs(ones - (n - ones)) <= 1


def test_survival_follows_class_definitions():
    ds = generate_cohort(tiny_config(n_patients=60))
    for p in ds.patients:
        if p.class_label == 1:
            assert p.event is True and 30 / 365.25 <= p.survival_time <= 3.0
        else:
            assert p.event is False and p.survival_time > 5.0


def test_labels_are_linearly_separable_without_noise():
    # labels threshold a linear functional of the latent, and noise-free
    # features are a linear image of the latent
    ds = generate_cohort(tiny_config(n_patients=80, noise_sigma=0.0, confound_strength=0.0, class_separation=0.0))
    x = np.stack([ds.scans[p.scans[0]].features.mean(axis=0) for p in ds.patients])
    y = np.array([str(p.class_label) for p in ds.patients])
    ps = ProbeSet(x, y)
    assert probe_accuracy(train_scanner_probe(ps, ProbeConfig(gtol=1e-9)), ps) == 1.0


def test_scanner_label_bias_only_touches_subset_cohorts():
    biased = generate_cohort(tiny_config(n_patients=200, scanner_label_bias=1.0))
    for p in biased.patients:
        scanners = sorted(biased.scans[s].scanner_id for s in p.scans)
        expected = ["scanner_0", "scanner_1"] if p.class_label == 1 else ["scanner_1", "scanner_2"]
        assert scanners == expected
    full = generate_cohort(tiny_config(scans_per_patient=None, scanner_label_bias=1.0))
    assert all(len(p.scans) == 3 for p in full.patients)


@pytest.mark.parametrize(
    "field, value",
    [
        ("n_patients", 1),
        ("tiles_per_scan", 0),
        ("confound_strength", -1.0),
        ("noise_sigma", -0.1),
        ("scans_per_patient", 4),
        ("scanner_label_bias", 1.5),
        ("label_noise", -1.0),
    ],
)
def test_invalid_config_names_the_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate_cohort(tiny_config(**{field: value}))


def test_negative_scanner_scale_is_rejected():
    cfg = tiny_config()
    cfg.scanners = [ScannerSpec("a", -1.0), ScannerSpec("b")]
    with pytest.raises(ConfigError, match="scanners"):
        generate_cohort(cfg)


def test_config_round_trips_through_dict():
    cfg = tiny_config(label_noise=0.3)
    assert GeneratorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        GeneratorConfig.from_dict({"bogus": 1})


def test_scanner_is_linearly_decodable_from_raw_features():
    scanners = [ScannerSpec(f"scanner_{i}", 1.0, 0.25) for i in range(5)]
    common = dict(n_patients=40, tiles_per_scan=32, feature_dim=32, scanners=scanners, scans_per_patient=None)
    train = generate_cohort(GeneratorConfig(confound_strength=1.0, noise_sigma=1.0, seed=1, **common))
    held = generate_cohort(GeneratorConfig(confound_strength=1.0, noise_sigma=1.0, seed=2, id_prefix="H", **common))
    probe = train_scanner_probe(raw_probe_set(train, 16))
    assert probe_accuracy(probe, raw_probe_set(held, 16, seed=1)) >= 0.95


# ----------------------------------------------------------------------
# augmentation


def test_identity_params_leave_tile_unchanged(rng):
    tile = rng.random((6, 5, 3))
    np.testing.assert_allclose(augment_tile(tile, AugmentParams()), tile, atol=1e-12)


def test_hue_half_turn_maps_red_to_cyan():
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1.0
    out = augment_tile(red, AugmentParams(hue_shift=0.5), enforce_ranges=False)
    np.testing.assert_allclose(out, np.broadcast_to([0.0, 1.0, 1.0], out.shape), atol=1e-9)


def test_hue_shift_beyond_range_is_rejected():
    with pytest.raises(ConfigError, match="hue_shift"):
        augment_tile(np.zeros((1, 1, 3)), AugmentParams(hue_shift=0.5))


def test_doubling_value_of_gray():
    gray = np.full((3, 3, 3), 0.3)
    np.testing.assert_allclose(augment_tile(gray, AugmentParams(value=2.0)), 0.6, atol=1e-12)


def test_contrast_is_mean_grey_preserving():
    rng = np.random.default_rng(1)
    tile = 0.25 + 0.5 * rng.random((4, 4, 3))
    out = augment_tile(tile, AugmentParams(contrast=1.5))
    gray = np.array([0.299, 0.587, 0.114])
    m = (tile @ gray).mean()
    np.testing.assert_allclose(out, np.clip(m + 1.5 * (tile - m), 0, 1), atol=1e-12)


def test_noise_is_bounded_and_shared_across_channels():
    gray = np.full((8, 8, 3), 0.5)
    out = augment_tile(gray, AugmentParams(noise_max=0.02), np.random.default_rng(0))
    eta = out - 0.5
    assert eta.min() >= 0 and eta.max() <= 0.02
    assert np.array_equal(eta[..., 0], eta[..., 1]) and np.array_equal(eta[..., 1], eta[..., 2])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=12, max_size=12),
    st.floats(-0.2, 0.2),
    st.floats(1 / 3, 3),
    st.floats(0.5, 2),
    st.floats(0.5, 2),
    st.integers(0, 2**32 - 1),
)
def test_augmented_tile_stays_in_unit_cube(px, dh, s, v, c, seed):
    tile = np.array(px).reshape(2, 2, 3)
    out = augment_tile(tile, AugmentParams(dh, s, v, c, 0.02), np.random.default_rng(seed))
    assert out.shape == tile.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=300, deadline=None)
@given(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)))
def test_hsv_matches_stdlib_colorsys(rgb):
    hsv = rgb_to_hsv(np.array(rgb))
    np.testing.assert_allclose(hsv, colorsys.rgb_to_hsv(*rgb), atol=1e-12)
    np.testing.assert_allclose(hsv_to_rgb(hsv), colorsys.hsv_to_rgb(*hsv), atol=1e-12)
    np.testing.assert_allclose(hsv_to_rgb(hsv), rgb, atol=1e-12)


def test_sampled_hue_covers_its_range():
    rng = np.random.default_rng(0)
    dh = np.array([sample_augment_params(rng).hue_shift for _ in range(100_000)])
    assert -0.2 <= dh.min() <= -0.18
    assert 0.18 <= dh.max() <= 0.2


def test_sampled_params_are_valid_and_reproducible():
    a = [sample_augment_params(np.random.default_rng(5)) for _ in range(2)]
    assert a[0] == a[1]
    rng = np.random.default_rng(6)
    for _ in range(1000):
        sample_augment_params(rng).check()


# ----------------------------------------------------------------------
# surrogate pairs


def test_zero_magnitude_surrogate_is_a_copy(tiny_ds, rng):
    scan = next(iter(tiny_ds.scans.values()))
    pr = surrogate_pair(scan, rng, magnitude=0.0)
    assert np.array_equal(pr.scan_b.features, scan.features)
    assert pr.scan_b.scanner_id == SURROGATE_SCANNER


def test_surrogate_uses_identity_correspondence(tiny_ds, rng):
    scan = next(iter(tiny_ds.scans.values()))
    pr = surrogate_pair(scan, rng)
    assert np.array_equal(pr.correspondence, np.stack([np.arange(scan.n_tiles)] * 2, axis=1))
    assert pr.scan_a is scan and pr.scan_b.patient_id == scan.patient_id


def test_surrogate_distortion_changes_features(tiny_ds, rng):
    scan = next(iter(tiny_ds.scans.values()))
    pr = surrogate_pair(scan, rng, magnitude=1.0)
    gap = np.linalg.norm(pr.scan_b.features - scan.features) / np.linalg.norm(scan.features - scan.features.mean(0))
    assert gap > 0.1
