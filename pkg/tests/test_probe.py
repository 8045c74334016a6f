from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from conftest import tiny_config
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, rosen, rosen_der

from robustmil.errors import ConfigError, DataError, DimensionError, NumericError
from robustmil.net import MilNetwork
from robustmil.probe import (
    DIFFERENT_PATIENT,
    SAME_PATIENT,
    TAPS,
    ProbeConfig,
    ProbeSet,
    Standardizer,
    confusion_matrix,
    cosine,
    different_patient_pairs,
    embedding_probe_set,
    layer_cosine_report,
    lbfgs,
    per_class_accuracy,
    probe_accuracy,
    raw_probe_set,
    same_patient_pairs,
    train_scanner_probe,
)
from robustmil.synth import ScannerSpec, generate_cohort


def _blobs(rng, n_per=50, d=6, classes=("s0", "s1"), margin=10.0):
    feats, labels = [], []
    for i, c in enumerate(classes):
        center = np.zeros(d)
        center[i % d] = margin * (1 + i // d)
        feats.append(center + rng.standard_normal((n_per, d)))
        labels += [c] * n_per
    return ProbeSet(np.concatenate(feats), np.array(labels))


# solver


def test_lbfgs_quadratic_exact(rng):
    A = rng.standard_normal((5, 5))
    H = A @ A.T + 5 * np.eye(5)
    c = rng.standard_normal(5)
    res = lbfgs(lambda x: (0.5 * x @ H @ x - c @ x, H @ x - c), np.zeros(5), 200, 10, 1.0, 1e-7)
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(H, c), atol=1e-6)


def test_lbfgs_rosenbrock_matches_scipy():
    x0 = np.array([-1.2, 1.0, -0.5, 0.8])
    res = lbfgs(lambda x: (rosen(x), rosen_der(x)), x0, 1000, 50, 1.0, 1e-8)
    ref = minimize(rosen, x0, jac=rosen_der, method="L-BFGS-B", options=dict(gtol=1e-10, ftol=0))
    assert res.converged and res.grad_inf_norm < 1e-8
    np.testing.assert_allclose(res.x, ref.x, atol=1e-5)
    np.testing.assert_allclose(res.x, np.ones(4), atol=1e-5)
    assert all(b <= a for a, b in zip(res.values, res.values[1:]))


def test_lbfgs_reports_non_convergence():
    res = lbfgs(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]), 3, 5, 1.0, 1e-12)
    assert not res.converged and res.iterations <= 3
    assert res.value <= rosen(np.array([-1.2, 1.0]))


# probe


def test_separable_probe_is_perfect(rng):
    train = _blobs(rng)
    probe = train_scanner_probe(train)
    assert probe_accuracy(probe, train) == 1.0
    assert probe_accuracy(probe, _blobs(rng)) == 1.0
    assert all(b <= a for a, b in zip(probe.values, probe.values[1:]))


def test_shuffled_labels_give_chance(rng):
    classes = ("s0", "s1", "s2")
    accs = []
    for i in range(20):
        r = np.random.default_rng(i)
        train = _blobs(r, n_per=100, classes=classes, margin=0.0)
        test = _blobs(r, n_per=100, classes=classes, margin=0.0)
        train.labels = r.permutation(train.labels)
        accs.append(probe_accuracy(train_scanner_probe(train), test))
    assert abs(np.mean(accs) - 1 / 3) <= 0.05


def test_constant_features_predict_majority():
    train = ProbeSet(np.ones((10, 3)), np.array(["a"] * 7 + ["b"] * 3))
    probe = train_scanner_probe(train)
    assert probe_accuracy(probe, train) == pytest.approx(0.7)
    assert set(probe.predict(train)) == {"a"}


def test_probe_deterministic(rng):
    train = _blobs(rng, classes=("a", "b", "c"), margin=2.0)
    p1, p2 = train_scanner_probe(train), train_scanner_probe(train)
    assert np.array_equal(p1.W, p2.W) and np.array_equal(p1.b, p2.b)


def test_standardization_once_only(rng):
    train = _blobs(rng)
    st_ = Standardizer.fit(train.features)
    once = st_.apply(train)
    np.testing.assert_allclose(once.features.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(once.features.std(axis=0), 1, atol=1e-12)
    with pytest.raises(DataError, match="already standardized"):
        st_.apply(once)
    with pytest.raises(DataError):
        train_scanner_probe(once)
    with pytest.raises(DimensionError):
        st_.apply(ProbeSet(np.ones((2, 3)), np.array(["s0", "s1"])))


def test_probe_errors_and_reports(rng):
    with pytest.raises(DataError):
        train_scanner_probe(ProbeSet(np.ones((4, 2)), np.array(["a"] * 4)))
    with pytest.raises(ConfigError):
        train_scanner_probe(_blobs(rng), ProbeConfig(history_size=0))
    probe = train_scanner_probe(_blobs(rng))
    with pytest.raises(DataError, match="s9"):
        probe_accuracy(probe, ProbeSet(np.ones((1, 6)), np.array(["s9"])))
    test = _blobs(rng)
    assert confusion_matrix(probe, test).tolist() == [[50, 0], [0, 50]]
    assert per_class_accuracy(probe, test) == {"s0": 1.0, "s1": 1.0}


def test_raw_probe_on_five_scanner_cohort():
    cfg = tiny_config(
        scanners=[ScannerSpec(f"scanner_{i}", 1.0, 0.0) for i in range(5)],
        feature_dim=16,
        n_patients=20,
        confound_strength=2.0,
    )
    tr = raw_probe_set(generate_cohort(cfg), 16, 0)
    te = raw_probe_set(generate_cohort(replace(cfg, seed=99, id_prefix="T")), 16, 0)
    assert probe_accuracy(train_scanner_probe(tr), te) >= 0.95


def test_embedding_probe_set_uses_same_tiles(tiny_ds):
    net = MilNetwork(tiny_ds.feature_dim, seed=0)
    raw = raw_probe_set(tiny_ds, 5, seed=3)
    emb = embedding_probe_set(net, tiny_ds, 5, seed=3)
    assert np.array_equal(raw.labels, emb.labels)
    assert emb.features.shape == (len(raw.labels), 256)


# cosine


def test_cosine_examples():
    assert cosine(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]]))[0] == pytest.approx(1.0)
    assert cosine(np.array([[1.0, 0.0]]), np.array([[0.0, 3.0]]))[0] == 0.0
    with pytest.raises(NumericError):
        cosine(np.zeros((1, 2)), np.ones((1, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cosine_bounded(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((4, 3)) * r.uniform(1e-3, 1e3)
    s = cosine(a, a * r.uniform(0.1, 10)) if seed % 2 else cosine(a, r.standard_normal((4, 3)))
    assert np.all(s <= 1) and np.all(s >= -1)


def test_identical_scans_have_similarity_one(tiny_ds):
    # one patient's two scans replaced by identical features
    p = tiny_ds.patients[0]
    a, b = (tiny_ds.scans[s] for s in p.scans)
    scans = dict(tiny_ds.scans)
    scans[b.scan_id] = replace(b, features=a.features.copy())
    ds = replace(tiny_ds, scans=scans)
    net = MilNetwork(ds.feature_dim, seed=0)
    rep = layer_cosine_report(net, MilNetwork(ds.feature_dim, seed=1), ds)
    k = rep.pairs[SAME_PATIENT].index(tuple(p.scans))
    for tap in TAPS:
        assert rep.tables[("a", tap, SAME_PATIENT)][k] == pytest.approx(1.0, abs=1e-6)


def test_cosine_report_shape_and_errors(tiny_ds):
    net_a, net_b = MilNetwork(tiny_ds.feature_dim, seed=0), MilNetwork(tiny_ds.feature_dim, seed=1)
    rep = layer_cosine_report(net_a, net_b, tiny_ds, ("zero", "star"), max_different_pairs=10)
    assert len(rep.tables) == 2 * len(TAPS) * 2
    assert len(rep.pairs[DIFFERENT_PATIENT]) <= 10
    assert len(rep.pairs[SAME_PATIENT]) == len(same_patient_pairs(tiny_ds))
    assert len(rep.rows()) == sum(len(v) for v in rep.tables.values())
    with pytest.raises(DimensionError):
        layer_cosine_report(net_a, MilNetwork(tiny_ds.feature_dim + 1), tiny_ds)
    for a, b in different_patient_pairs(tiny_ds):
        sa, sb = tiny_ds.scans[a], tiny_ds.scans[b]
        assert sa.patient_id != sb.patient_id and sa.scanner_id == sb.scanner_id and sa.site_id == sb.site_id
