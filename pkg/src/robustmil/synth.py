"""Synthetic cohorts with planted biology and scanner/site confounds.

Tile feature for patient p, tile t, scanner s::

    x = B b_p + eps_pt + confound_strength * (o_s + gain_s * (B b_p) + w_site(p))

``B``, the label functional, the scanner directions and the site directions
belong to the *world* (``world_seed``) so that train/tune/test cohorts drawn
with different ``seed`` values share the same scanners. Scans of one patient
share ``b_p`` and the per-tile noise, so they differ only by scanner terms.

Class labels split patients at the median of a linear functional of ``b_p``,
optionally blurred by unobserved noise (``label_noise``). With
``scanner_label_bias`` > 0 the scanner subset a patient is imaged on tracks
its class, which plants a scanner shortcut in the cohort.

Also holds the HSV augmentation used to fabricate surrogate scans and the
feature-space surrogate pairing used at training time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from robustmil.core import Dataset, PatientRecord, ScanPair, ScanRecord
from robustmil.errors import ConfigError

SURROGATE_SCANNER = "surrogate"

# survival ranges implied by the good/poor outcome definitions
GOOD_FOLLOWUP_YEARS = (5.0, 8.0)
POOR_EVENT_YEARS = (30 / 365.25, 3.0)


@dataclass
class ScannerSpec:
    name: str
    offset_scale: float = 1.0
    gain_scale: float = 0.0


@dataclass
class SiteSpec:
    name: str
    offset_scale: float = 0.0


def _default_scanners() -> list[ScannerSpec]:
    return [ScannerSpec(f"scanner_{i}", 1.0, 0.25) for i in range(3)]


def _default_sites() -> list[SiteSpec]:
    return [SiteSpec("site_0", 0.5), SiteSpec("site_1", 0.5)]


@dataclass
class GeneratorConfig:
    n_patients: int = 40
    tiles_per_scan: int = 64
    feature_dim: int = 64
    scanners: list[ScannerSpec] = field(default_factory=_default_scanners)
    sites: list[SiteSpec] = field(default_factory=_default_sites)
    biology_dim: int = 8
    class_separation: float = 1.0
    confound_strength: float = 2.0
    noise_sigma: float = 1.0
    good_followup: tuple[float, float] = GOOD_FOLLOWUP_YEARS
    poor_event: tuple[float, float] = POOR_EVENT_YEARS
    # scanners imaged per patient; None means every scanner
    scans_per_patient: int | None = 2
    # fraction of patients left with a single scan (surrogate-paired in training)
    unpaired_fraction: float = 0.0
    balanced_classes: bool = True
    # sd of an unobserved term added to the label functional before thresholding
    label_noise: float = 0.0
    # probability that a patient imaged on a scanner subset gets the subset
    # preferred by its class (low-index scanners for class 1, high-index for 0)
    scanner_label_bias: float = 0.0
    stratum_prevalence: float = 0.3
    id_prefix: str = "P"
    world_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        def bad(name: str, why: str) -> ConfigError:
            return ConfigError(f"GeneratorConfig.{name}: {why}")

        if self.n_patients < 2:
            raise bad("n_patients", f"must be >= 2, got {self.n_patients}")
        if self.tiles_per_scan < 1:
            raise bad("tiles_per_scan", f"must be >= 1, got {self.tiles_per_scan}")
        if self.feature_dim < 1:
            raise bad("feature_dim", f"must be >= 1, got {self.feature_dim}")
        if self.biology_dim < 1:
            raise bad("biology_dim", f"must be >= 1, got {self.biology_dim}")
        if not self.scanners:
            raise bad("scanners", "at least one scanner is required")
        if len({s.name for s in self.scanners}) != len(self.scanners):
            raise bad("scanners", "scanner names must be unique")
        if any(s.name == SURROGATE_SCANNER for s in self.scanners):
            raise bad("scanners", f"'{SURROGATE_SCANNER}' is reserved")
        for s in self.scanners:
            if s.offset_scale < 0 or s.gain_scale < 0:
                raise bad("scanners", f"scales of {s.name} must be >= 0")
        if not self.sites:
            raise bad("sites", "at least one site is required")
        for s in self.sites:
            if s.offset_scale < 0:
                raise bad("sites", f"offset_scale of {s.name} must be >= 0")
        for name in ("class_separation", "confound_strength", "noise_sigma", "label_noise"):
            if getattr(self, name) < 0:
                raise bad(name, "must be >= 0")
        if self.scans_per_patient is not None and not 1 <= self.scans_per_patient <= len(self.scanners):
            raise bad("scans_per_patient", f"must be in [1, {len(self.scanners)}]")
        if not 0 <= self.unpaired_fraction <= 1:
            raise bad("unpaired_fraction", "must be in [0, 1]")
        if not 0 <= self.scanner_label_bias <= 1:
            raise bad("scanner_label_bias", "must be in [0, 1]")
        if not 0 <= self.stratum_prevalence <= 1:
            raise bad("stratum_prevalence", "must be in [0, 1]")
        for name in ("good_followup", "poor_event"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise bad(name, "must be an increasing positive (low, high) range")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["good_followup"] = list(self.good_followup)
        d["poor_event"] = list(self.poor_event)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GeneratorConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"GeneratorConfig: unknown field(s) {sorted(unknown)}")
        d = dict(d)
        try:
            if "scanners" in d:
                d["scanners"] = [s if isinstance(s, ScannerSpec) else ScannerSpec(**s) for s in d["scanners"]]
            if "sites" in d:
                d["sites"] = [s if isinstance(s, SiteSpec) else SiteSpec(**s) for s in d["sites"]]
        except TypeError as exc:
            raise ConfigError(f"GeneratorConfig.scanners/sites: {exc}") from exc
        for key in ("good_followup", "poor_event"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


@dataclass
class _World:
    biology: np.ndarray  # (D, k)
    label_dir: np.ndarray  # (k,)
    scanner_offset: np.ndarray  # (n_scanners, D), already scaled
    scanner_gain: np.ndarray  # (n_scanners, D), already scaled
    site_offset: np.ndarray  # (n_sites, D), already scaled


def _world(cfg: GeneratorConfig) -> _World:
    D, k = cfg.feature_dim, cfg.biology_dim
    rng = np.random.default_rng([cfg.world_seed, 0])
    biology = rng.standard_normal((D, k)) / math.sqrt(k)
    label_dir = rng.standard_normal(k)
    label_dir /= np.linalg.norm(label_dir)
    # keyed by index so that adding a scanner leaves the others unchanged
    offs, gains = [], []
    for i, s in enumerate(cfg.scanners):
        r = np.random.default_rng([cfg.world_seed, 1, i])
        offs.append(s.offset_scale * r.standard_normal(D))
        gains.append(s.gain_scale * r.standard_normal(D))
    sites = []
    for i, s in enumerate(cfg.sites):
        r = np.random.default_rng([cfg.world_seed, 2, i])
        sites.append(s.offset_scale * r.standard_normal(D))
    return _World(biology, label_dir, np.array(offs), np.array(gains), np.array(sites))


def generate_cohort(cfg: GeneratorConfig) -> Dataset:
    cfg.validate()
    world = _world(cfg)
    rng = np.random.default_rng([cfg.seed, 17])
    n, T, D, k = cfg.n_patients, cfg.tiles_per_scan, cfg.feature_dim, cfg.biology_dim
    n_sc = len(cfg.scanners)
    per = n_sc if cfg.scans_per_patient is None else cfg.scans_per_patient

    latent = rng.standard_normal((n, k))
    proj = latent @ world.label_dir
    if cfg.label_noise > 0:
        proj = proj + cfg.label_noise * rng.standard_normal(n)
    if cfg.balanced_classes:
        order = np.argsort(proj, kind="stable")
        labels = np.zeros(n, dtype=np.int64)
        labels[order[n // 2 + n % 2 :]] = 1
    else:
        labels = (proj > 0).astype(np.int64)
    # widen the margin along the label functional
    latent = latent + cfg.class_separation * (labels - 0.5)[:, None] * world.label_dir[None, :]

    n_single = int(round(cfg.unpaired_fraction * n))
    single = np.zeros(n, dtype=bool)
    if n_single:
        single[rng.choice(n, size=n_single, replace=False)] = True

    side = int(math.ceil(math.sqrt(T))) + 2
    patients: list[PatientRecord] = []
    scans: dict[str, ScanRecord] = {}
    pairs: list[ScanPair] = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        pid = f"{cfg.id_prefix}{i:0{width}d}"
        site = int(rng.integers(len(cfg.sites)))
        n_scans = 1 if single[i] else per
        chosen = np.sort(rng.choice(n_sc, size=n_scans, replace=False))
        if n_scans < n_sc and cfg.scanner_label_bias > 0 and rng.random() < cfg.scanner_label_bias:
            chosen = np.arange(n_scans) if labels[i] == 1 else np.arange(n_sc - n_scans, n_sc)
        signal = world.biology @ latent[i]
        noise = cfg.noise_sigma * rng.standard_normal((T, D))
        cells = rng.choice(side * side, size=T, replace=False)
        base = np.stack([cells % side, cells // side], axis=1).astype(np.int64)

        c = int(labels[i])
        if c == 1:
            time = float(rng.uniform(*cfg.poor_event))
            event = True
        else:
            time = float(rng.uniform(*cfg.good_followup))
            event = False
        stratum = int(rng.random() < cfg.stratum_prevalence)

        rec_scans: list[ScanRecord] = []
        tile_orders: list[np.ndarray] = []
        for j, s in enumerate(chosen):
            confound = world.scanner_offset[s] + world.scanner_gain[s] * signal + world.site_offset[site]
            feats = signal[None, :] + noise + cfg.confound_strength * confound[None, :]
            # first scan keeps the reference tile order; later scans are
            # shuffled and shifted as if registered onto a different grid
            if j == 0:
                order = np.arange(T)
                shift = np.zeros(2, dtype=np.int64)
            else:
                order = rng.permutation(T)
                shift = rng.integers(-3, 4, size=2)
            sid = f"{pid}_{cfg.scanners[s].name}"
            rec = ScanRecord(
                sid,
                pid,
                cfg.scanners[s].name,
                cfg.sites[site].name,
                np.ascontiguousarray(feats[order], dtype=np.float32),
                base[order] + shift,
            )
            rec_scans.append(rec)
            tile_orders.append(order)
            scans[sid] = rec
        for a in range(len(rec_scans)):
            for b in range(a + 1, len(rec_scans)):
                # position in scan b of each tile of scan a
                inv_b = np.argsort(tile_orders[b])
                corr = np.stack([np.arange(T), inv_b[tile_orders[a]]], axis=1).astype(np.int64)
                pairs.append(ScanPair(rec_scans[a], rec_scans[b], corr))
        patients.append(PatientRecord(pid, c, tuple(r.scan_id for r in rec_scans), time, event, stratum))
    meta = {"generator": cfg.to_dict()}
    return Dataset(patients, scans, pairs, D, meta)


# --------------------------------------------------------------------------
# image-space augmentation

HUE_SHIFT_RANGE = (-0.2, 0.2)
SATURATION_RANGE = (1 / 3, 3.0)
VALUE_RANGE = (0.5, 2.0)
CONTRAST_RANGE = (0.5, 2.0)
NOISE_MAX = 0.02
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentParams:
    hue_shift: float = 0.0
    saturation: float = 1.0
    value: float = 1.0
    contrast: float = 1.0
    # per-pixel additive noise is U(0, noise_max)
    noise_max: float = 0.0

    def check(self) -> None:
        for name, (lo, hi) in (
            ("hue_shift", HUE_SHIFT_RANGE),
            ("saturation", SATURATION_RANGE),
            ("value", VALUE_RANGE),
            ("contrast", CONTRAST_RANGE),
            ("noise_max", (0.0, NOISE_MAX)),
        ):
            v = getattr(self, name)
            if not lo - 1e-12 <= v <= hi + 1e-12:
                raise ConfigError(f"AugmentParams.{name}={v} outside [{lo}, {hi}]")


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    """Draw one scan-level augmentation (all tiles of a scan share it)."""
    return AugmentParams(
        hue_shift=float(rng.uniform(*HUE_SHIFT_RANGE)),
        saturation=float(rng.uniform(*SATURATION_RANGE)),
        value=float(rng.uniform(*VALUE_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        noise_max=NOISE_MAX,
    )


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV on the last axis, all channels in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.divide(delta, maxc, out=np.zeros_like(maxc), where=maxc > 0)
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def augment_tile(
    tile: np.ndarray,
    params: AugmentParams,
    rng: np.random.Generator | None = None,
    enforce_ranges: bool = True,
) -> np.ndarray:
    """Colour-augment an (H, W, 3) RGB tile with values in [0, 1].

    HSV jitter (hue wrap, saturation and value scaling), clip, back to RGB,
    mean-preserving contrast around the mean grey level (clamped, as the
    usual ``adjust_contrast`` does), per-pixel additive noise, final clip.
    Parameters outside the sampling ranges are rejected unless
    ``enforce_ranges`` is False (hue is modular, so any shift is defined).
    """
    if enforce_ranges:
        params.check()
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim != 3 or tile.shape[-1] != 3:
        raise ConfigError(f"tile must have shape (H, W, 3), got {tile.shape}")
    hsv = rgb_to_hsv(tile)
    hsv[..., 0] = np.mod(hsv[..., 0] + params.hue_shift, 1.0)
    hsv[..., 1] *= params.saturation
    hsv[..., 2] *= params.value
    out = hsv_to_rgb(np.clip(hsv, 0.0, 1.0))
    gray_mean = float((out @ GRAY_WEIGHTS).mean())
    out = np.clip(gray_mean + params.contrast * (out - gray_mean), 0.0, 1.0)
    if params.noise_max > 0:
        if rng is None:
            raise ConfigError("augment_tile needs an rng when noise_max > 0")
        eta = rng.uniform(0.0, params.noise_max, size=out.shape[:2])
        out = out + eta[..., None]
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# surrogate pairs


def surrogate_pair(scan: ScanRecord, rng: np.random.Generator, magnitude: float = 1.0) -> ScanPair:
    """Pair ``scan`` with a distorted copy standing in for a second scanner.

    The distortion lives in feature space: a per-feature gain jitter plus a
    scan-constant offset whose per-feature scale matches the spread of the
    scan's own tiles. ``magnitude`` = 0 returns an exact copy.
    """
    x = np.asarray(scan.features, dtype=np.float64)
    D = x.shape[1]
    spread = x.std(axis=0) if x.shape[0] > 1 else np.abs(x[0])
    spread = np.where(spread > 0, spread, 1.0)
    gain = 1.0 + magnitude * 0.1 * rng.standard_normal(D)
    offset = magnitude * spread * rng.standard_normal(D)
    xb = (x * gain[None, :] + offset[None, :]).astype(np.float32) if magnitude else scan.features.copy()
    twin = ScanRecord(
        f"{scan.scan_id}~{SURROGATE_SCANNER}",
        scan.patient_id,
        SURROGATE_SCANNER,
        scan.site_id,
        xb,
        np.array(scan.coords, copy=True),
    )
    idx = np.arange(scan.n_tiles, dtype=np.int64)
    return ScanPair(scan, twin, np.stack([idx, idx], axis=1))
