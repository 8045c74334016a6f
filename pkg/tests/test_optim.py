from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustmil.errors import ConfigError, DataError, NumericError
from robustmil.net import MilNetwork
from robustmil.optim import OptimConfig, clip_gradients, global_norm, lr_at, max_lr_increment, sgd_step


def test_defaults():
    cfg = OptimConfig()
    assert (cfg.momentum, cfg.weight_decay, cfg.max_lr, cfg.total_updates, cfg.clip_norm) == (0.9, 0.02, 0.01, 20000, 20.0)
    cfg.validate()
    for bad in (dict(max_lr=0), dict(warmup_fraction=1.0), dict(momentum=-0.1), dict(total_updates=2)):
        with pytest.raises(ConfigError):
            OptimConfig(**bad).validate()


def test_clip_examples():
    g = {"a": np.array([6.0, 8.0])}  # norm 10
    out, scale = clip_gradients(g, 20.0)
    assert scale == 1.0 and np.array_equal(out["a"], g["a"])
    g = {"a": np.array([24.0]), "b": np.array([32.0])}  # norm 40
    out, scale = clip_gradients(g, 20.0)
    assert scale == 0.5 and abs(global_norm(out) - 20.0) < 1e-9
    out, scale = clip_gradients({"a": np.zeros(3)}, 20.0)
    assert scale == 1.0 and not out["a"].any()


def test_clip_non_finite_reports_step():
    with pytest.raises(NumericError, match="step 7"):
        clip_gradients({"a": np.array([1.0, np.nan])}, 20.0, step=7)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_clip_never_increases_norm(seed, clip):
    r = np.random.default_rng(seed)
    g = {"a": r.standard_normal(5) * r.uniform(0, 50), "b": r.standard_normal((2, 3)).astype(np.float32)}
    out, scale = clip_gradients(g, clip)
    assert global_norm(out) <= min(global_norm(g), clip) + 1e-9
    assert 0 < scale <= 1


def test_schedule_endpoints():
    cfg = OptimConfig()
    assert lr_at(0, cfg) == pytest.approx(4e-4, abs=1e-15)
    assert lr_at(cfg.peak_step, cfg) == cfg.max_lr
    assert lr_at(cfg.total_updates - 1, cfg) == pytest.approx(cfg.max_lr / cfg.final_div_factor, abs=1e-12)
    with pytest.raises(ConfigError):
        lr_at(cfg.total_updates, cfg)
    with pytest.raises(ConfigError):
        lr_at(-1, cfg)


@pytest.mark.parametrize("total", [3, 10, 2000, 20000])
def test_schedule_continuity(total):
    cfg = OptimConfig(total_updates=total)
    lrs = np.array([lr_at(s, cfg) for s in range(total)])
    steps = np.abs(np.diff(lrs))
    # steepest point of a cosine phase: pi/2 * rise / phase length
    bound = 0.5 * math.pi * (cfg.max_lr - cfg.max_lr / cfg.div_factor) / cfg.peak_step
    bound = max(bound, 0.5 * math.pi * cfg.max_lr / (total - 1 - cfg.peak_step))
    assert max_lr_increment(cfg) <= bound + 1e-18
    assert np.all(steps <= max_lr_increment(cfg) + 1e-15)
    assert lrs.max() == cfg.max_lr and lrs.min() > 0


def test_schedule_increment_scales_inversely_with_length():
    # warmup over 30% of the updates: steepest step ~ (pi/2)/0.3 * max_lr/total
    for total in (2000, 20000):
        cfg = OptimConfig(total_updates=total)
        lrs = np.array([lr_at(s, cfg) for s in range(total)])
        assert np.abs(np.diff(lrs)).max() <= 5.3 * cfg.max_lr / total


def test_schedule_rejects_too_short():
    with pytest.raises(ConfigError):
        OptimConfig(total_updates=2).validate()


def test_sgd_examples():
    cfg = OptimConfig(weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0])}
    v: dict = {}
    sgd_step(p, {"w": np.zeros(2)}, v, 0.1, cfg)
    assert np.array_equal(p["w"], [1.0, -2.0])

    p, v = {"w": np.array([1.0])}, {}
    sgd_step(p, {"w": np.array([1.0])}, v, 0.1, cfg)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-15) and v["w"][0] == 1.0
    sgd_step(p, {"w": np.array([1.0])}, v, 0.1, cfg)
    assert v["w"][0] == pytest.approx(1.9, abs=1e-15)
    assert p["w"][0] == pytest.approx(0.9 - 0.19, abs=1e-15)


def test_sgd_weight_decay_and_exclusions():
    cfg = OptimConfig(weight_decay=0.5, momentum=0.0)
    p = {"enc0.W": np.array([2.0]), "enc0.b": np.array([2.0]), "bn0.gamma": np.array([2.0])}
    g = {k: np.zeros(1) for k in p}
    sgd_step(p, g, {}, 0.1, cfg, decays=MilNetwork.decays)
    assert p["enc0.W"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert p["enc0.b"][0] == 2.0 and p["bn0.gamma"][0] == 2.0


def test_sgd_keeps_dtype_and_checks_shapes():
    cfg = OptimConfig()
    p = {"w": np.ones(3, dtype=np.float32)}
    sgd_step(p, {"w": np.ones(3)}, {}, 0.1, cfg)
    assert p["w"].dtype == np.float32
    with pytest.raises(DataError):
        sgd_step(p, {"w": np.ones(4)}, {}, 0.1, cfg)
    with pytest.raises(DataError):
        sgd_step(p, {"w": np.ones(3)}, {"w": np.ones(2)}, 0.1, cfg)


def test_global_norm_float64():
    g = {"a": np.full(4, 1e20, dtype=np.float32)}
    assert global_norm(g) == pytest.approx(2e20, rel=1e-6)
    assert math.isfinite(global_norm(g))
