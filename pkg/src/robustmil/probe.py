"""Linear scanner probes and per-layer cosine-similarity diagnostics."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import line_search

from robustmil.core import Dataset
from robustmil.errors import ConfigError, DataError, DimensionError, NumericError
from robustmil.net import MilNetwork, pack_bags

TAPS = ("encoder_1", "encoder_2", "encoder_3", "pooled")
SAME_PATIENT = "same_patient"
DIFFERENT_PATIENT = "different_patient"


@dataclass
class ProbeConfig:
    max_iterations: int = 1000
    history_size: int = 50
    initial_step: float = 1.0
    gtol: float = 1e-6
    # tiles sampled per scan when building probe sets (None = all)
    tiles_per_scan: int | None = 16
    seed: int = 0

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError(f"ProbeConfig.max_iterations must be >= 1, got {self.max_iterations}")
        if self.history_size < 1:
            raise ConfigError(f"ProbeConfig.history_size must be >= 1, got {self.history_size}")
        if not self.initial_step > 0:
            raise ConfigError(f"ProbeConfig.initial_step must be > 0, got {self.initial_step}")
        if not self.gtol > 0:
            raise ConfigError(f"ProbeConfig.gtol must be > 0, got {self.gtol}")
        if self.tiles_per_scan is not None and self.tiles_per_scan < 1:
            raise ConfigError(f"ProbeConfig.tiles_per_scan must be >= 1, got {self.tiles_per_scan}")


# ----------------------------------------------------------------------
# limited-memory quasi-Newton


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    grad_inf_norm: float
    iterations: int
    converged: bool
    # objective after every accepted step, starting with the initial point
    values: list[float] = field(default_factory=list)


class _Memo:
    """Caches the last (f, g) so that line-search probes are not recomputed."""

    def __init__(self, fun: Callable[[np.ndarray], tuple[float, np.ndarray]]):
        self.fun = fun
        self.key: bytes | None = None
        self.val: tuple[float, np.ndarray] | None = None

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        key = x.tobytes()
        if key != self.key:
            f, g = self.fun(x)
            self.key, self.val = key, (float(f), np.asarray(g, dtype=np.float64))
        return self.val

    def f(self, x: np.ndarray) -> float:
        return self(x)[0]

    def g(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


def _two_loop(g: np.ndarray, s_hist: deque, y_hist: deque) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    max_iterations: int = 1000,
    history_size: int = 50,
    initial_step: float = 1.0,
    gtol: float = 1e-6,
) -> LbfgsResult:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Steps are accepted only when they satisfy the strong Wolfe conditions,
    so the objective never increases. Stops when the gradient inf-norm
    drops below ``gtol``; otherwise returns the last (best) iterate with
    ``converged`` False.
    """
    memo = _Memo(fun)
    x = np.array(x0, dtype=np.float64)
    f, g = memo(x)
    values = [f]
    s_hist: deque = deque(maxlen=history_size)
    y_hist: deque = deque(maxlen=history_size)
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        if np.max(np.abs(g)) < gtol:
            converged = True
            it -= 1
            break
        d = _two_loop(g, s_hist, y_hist)
        if d @ g >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        # the first step is scaled by the gradient size, later ones start at initial_step
        scale = initial_step if s_hist else initial_step * min(1.0, 1.0 / np.abs(g).sum())
        pk = scale * d
        with warnings.catch_warnings():
            # a failed search is reported through alpha None and ends the run
            warnings.filterwarnings("ignore", message="The line search algorithm")
            alpha, *_ = line_search(memo.f, memo.g, x, pk, gfk=g, old_fval=f, c1=1e-4, c2=0.9, maxiter=25)
        if alpha is None:
            break
        x_new = x + alpha * pk
        f_new, g_new = memo(x_new)
        s, y = x_new - x, g_new - g
        if s @ y > 1e-10 * (s @ s):
            s_hist.append(s)
            y_hist.append(y)
        x, f, g = x_new, f_new, g_new
        values.append(f)
    else:
        converged = bool(np.max(np.abs(g)) < gtol)
    return LbfgsResult(x, f, float(np.max(np.abs(g))), it, converged, values)


# ----------------------------------------------------------------------
# multinomial logistic probe


@dataclass
class ProbeSet:
    features: np.ndarray
    labels: np.ndarray  # class names, one per row
    standardized: bool = False

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError(f"probe set needs (n, d) features and n labels, got {self.features.shape}")


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> Standardizer:
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, ps: ProbeSet) -> ProbeSet:
        if ps.standardized:
            raise DataError("probe set is already standardized")
        if ps.features.shape[1] != len(self.mean):
            raise DimensionError(f"probe features have width {ps.features.shape[1]}, expected {len(self.mean)}")
        return ProbeSet((ps.features - self.mean) / self.std, ps.labels, standardized=True)


def logistic_objective(
    x: np.ndarray, y: np.ndarray, n_classes: int
) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Mean multinomial cross-entropy of ``x @ W + b`` over flat (W, b)."""
    n, d = x.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def fun(theta: np.ndarray) -> tuple[float, np.ndarray]:
        W = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes :]
        logits = x @ W + b
        mx = logits.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
        loss = float(np.mean(lse - logits[np.arange(n), y]))
        dlog = (np.exp(logits - lse[:, None]) - onehot) / n
        return loss, np.concatenate([(x.T @ dlog).ravel(), dlog.sum(axis=0)])

    return fun


@dataclass
class LinearProbe:
    W: np.ndarray
    b: np.ndarray
    classes: list[str]
    standardizer: Standardizer
    converged: bool
    iterations: int
    values: list[float]

    def logits(self, ps: ProbeSet) -> np.ndarray:
        std = ps if ps.standardized else self.standardizer.apply(ps)
        return std.features @ self.W + self.b

    def predict(self, ps: ProbeSet) -> np.ndarray:
        return np.asarray(self.classes)[np.argmax(self.logits(ps), axis=1)]


def train_scanner_probe(train: ProbeSet, cfg: ProbeConfig | None = None) -> LinearProbe:
    """Fit a multinomial logistic scanner classifier from zero initialization."""
    cfg = cfg or ProbeConfig()
    cfg.validate()
    classes = sorted({str(c) for c in train.labels})
    if len(classes) < 2:
        raise DataError("scanner probe needs at least two scanner classes")
    if train.standardized:
        raise DataError("pass raw features; the probe standardizes with training-split statistics")
    standardizer = Standardizer.fit(train.features)
    x = standardizer.apply(train).features
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[str(c)] for c in train.labels])
    d, C = x.shape[1], len(classes)
    res = lbfgs(
        logistic_objective(x, y, C),
        np.zeros(d * C + C),
        cfg.max_iterations,
        cfg.history_size,
        cfg.initial_step,
        cfg.gtol,
    )
    W = res.x[: d * C].reshape(d, C)
    b = res.x[d * C :]
    return LinearProbe(W, b, classes, standardizer, res.converged, res.iterations, res.values)


def _check_labels(probe: LinearProbe, ps: ProbeSet) -> None:
    unknown = sorted({str(c) for c in ps.labels} - set(probe.classes))
    if unknown:
        raise DataError(f"held-out labels {unknown} were not seen when training the probe")


def probe_accuracy(probe: LinearProbe, ps: ProbeSet) -> float:
    _check_labels(probe, ps)
    return float(np.mean(probe.predict(ps) == ps.labels.astype(str)))


def per_class_accuracy(probe: LinearProbe, ps: ProbeSet) -> dict[str, float | None]:
    _check_labels(probe, ps)
    pred = probe.predict(ps)
    truth = ps.labels.astype(str)
    return {c: (float(np.mean(pred[truth == c] == c)) if np.any(truth == c) else None) for c in probe.classes}


def confusion_matrix(probe: LinearProbe, ps: ProbeSet) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class (probe.classes order)."""
    _check_labels(probe, ps)
    index = {c: i for i, c in enumerate(probe.classes)}
    out = np.zeros((len(probe.classes), len(probe.classes)), dtype=np.int64)
    for t, p in zip(ps.labels.astype(str), probe.predict(ps)):
        out[index[t], index[p]] += 1
    return out


def _tile_rows(n_tiles: int, tiles_per_scan: int | None, rng: np.random.Generator) -> np.ndarray:
    if tiles_per_scan is None or tiles_per_scan >= n_tiles:
        return np.arange(n_tiles)
    return np.sort(rng.choice(n_tiles, size=tiles_per_scan, replace=False))


def raw_probe_set(ds: Dataset, tiles_per_scan: int | None = None, seed: int = 0) -> ProbeSet:
    """Tile features labelled by scanner."""
    rng = np.random.default_rng([seed, 5])
    feats, labels = [], []
    for sid in sorted(ds.scans):
        scan = ds.scans[sid]
        rows = _tile_rows(scan.n_tiles, tiles_per_scan, rng)
        feats.append(scan.features[rows])
        labels += [scan.scanner_id] * len(rows)
    return ProbeSet(np.concatenate(feats), np.array(labels))


def embedding_probe_set(
    net: MilNetwork, ds: Dataset, tiles_per_scan: int | None = None, seed: int = 0, chunk: int = 64
) -> ProbeSet:
    """Eval-mode encoder outputs of tiles, labelled by scanner.

    Uses the same tile subsample as :func:`raw_probe_set` for equal seeds.
    """
    rng = np.random.default_rng([seed, 5])
    ids = sorted(ds.scans)
    picked = [(sid, _tile_rows(ds.scans[sid].n_tiles, tiles_per_scan, rng)) for sid in ids]
    feats, labels = [], []
    for start in range(0, len(picked), chunk):
        part = picked[start : start + chunk]
        x = np.concatenate([ds.scans[sid].features[rows] for sid, rows in part])
        outs, _ = net.encode(x, train=False)
        feats.append(outs[-1])
        for sid, rows in part:
            labels += [ds.scans[sid].scanner_id] * len(rows)
    return ProbeSet(np.concatenate(feats), np.array(labels))


# ----------------------------------------------------------------------
# per-layer similarity


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise NumericError("cosine similarity of a zero vector is undefined")
    return np.clip((a * b).sum(axis=-1) / (na * nb), -1.0, 1.0)


def scan_tap_vectors(net: MilNetwork, ds: Dataset, scan_ids: Sequence[str], chunk: int = 64) -> dict[str, np.ndarray]:
    """Scan-level vector at every tap point (eval mode).

    Encoder taps are the tile mean of the post-norm layer output; the last
    tap is the attention-pooled scan embedding after its norm.
    """
    out: dict[str, list[np.ndarray]] = {t: [] for t in TAPS}
    for start in range(0, len(scan_ids), chunk):
        part = scan_ids[start : start + chunk]
        x, offsets = pack_bags([ds.scans[s].features for s in part])
        res = net.forward(x, offsets, train=False)
        counts = np.diff(offsets)[:, None]
        for name, tap in zip(TAPS[:-1], res.taps[:-1]):
            out[name].append(np.add.reduceat(tap.astype(np.float64), offsets[:-1], axis=0) / counts)
        out[TAPS[-1]].append(res.taps[-1].astype(np.float64))
    return {t: np.concatenate(v) for t, v in out.items()}


def same_patient_pairs(ds: Dataset) -> list[tuple[str, str]]:
    """Every pair of scans belonging to one patient."""
    return [pair for p in ds.patients for pair in combinations(p.scans, 2)]


def different_patient_pairs(ds: Dataset, max_pairs: int | None = None, seed: int = 0) -> list[tuple[str, str]]:
    """Scans of different patients taken on the same scanner at the same site."""
    groups: dict[tuple[str, str], list[str]] = {}
    for sid in sorted(ds.scans):
        s = ds.scans[sid]
        groups.setdefault((s.scanner_id, s.site_id), []).append(sid)
    pairs = [
        (a, b)
        for key in sorted(groups)
        for a, b in combinations(groups[key], 2)
        if ds.scans[a].patient_id != ds.scans[b].patient_id
    ]
    if max_pairs is not None and len(pairs) > max_pairs:
        keep = np.sort(np.random.default_rng([seed, 6]).choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[i] for i in keep]
    return pairs


@dataclass
class CosineReport:
    # (network, tap, pair type) -> similarities
    tables: dict[tuple[str, str, str], np.ndarray]
    pairs: dict[str, list[tuple[str, str]]]

    def median(self, network: str, tap: str, pair_type: str) -> float:
        return float(np.median(self.tables[(network, tap, pair_type)]))

    def medians(self) -> dict[tuple[str, str, str], float]:
        return {k: float(np.median(v)) for k, v in self.tables.items()}

    def rows(self) -> list[dict]:
        out = []
        for (network, tap, kind), sims in self.tables.items():
            for (a, b), v in zip(self.pairs[kind], sims):
                out.append(
                    {"network": network, "layer": tap, "pair_type": kind, "scan_a": a, "scan_b": b, "similarity": float(v)}
                )
        return out


def _same_architecture(a: MilNetwork, b: MilNetwork) -> bool:
    if a.in_dim != b.in_dim or a.params.keys() != b.params.keys():
        return False
    return all(a.params[k].shape == b.params[k].shape for k in a.params)


def layer_cosine_report(
    net_a: MilNetwork,
    net_b: MilNetwork,
    ds: Dataset,
    names: tuple[str, str] = ("a", "b"),
    max_different_pairs: int | None = None,
    seed: int = 0,
) -> CosineReport:
    """Same-patient and different-patient similarity at each tap for two networks."""
    if not _same_architecture(net_a, net_b):
        raise DimensionError("networks to compare have different architectures")
    if names[0] == names[1]:
        raise ConfigError("network names must differ")
    pairs = {
        SAME_PATIENT: same_patient_pairs(ds),
        DIFFERENT_PATIENT: different_patient_pairs(ds, max_different_pairs, seed),
    }
    if not pairs[SAME_PATIENT]:
        raise DataError("no patient has two scans; same-patient similarity is undefined")
    if not pairs[DIFFERENT_PATIENT]:
        raise DataError("no two patients share a scanner and site")
    ids = sorted(ds.scans)
    row = {sid: i for i, sid in enumerate(ids)}
    tables: dict[tuple[str, str, str], np.ndarray] = {}
    for name, net in zip(names, (net_a, net_b)):
        vecs = scan_tap_vectors(net, ds, ids)
        for tap in TAPS:
            for kind, plist in pairs.items():
                ia = np.array([row[a] for a, _ in plist])
                ib = np.array([row[b] for _, b in plist])
                tables[(name, tap, kind)] = cosine(vecs[tap][ia], vecs[tap][ib])
    return CosineReport(tables, pairs)
