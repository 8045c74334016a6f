"""Training loop: balanced pair batches, bag sampling, loss assembly, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from robustmil.core import Dataset, PatientRecord, ScanPair, validate_dataset
from robustmil.errors import ConfigError, DataError, NumericError
from robustmil.losses import LossConfig, classification_loss, embedding_loss_indexed, score_loss, total_loss
from robustmil.net import MilNetwork, checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, pack_bags
from robustmil.optim import OptimConfig, clip_gradients, global_norm, lr_at, sgd_step
from robustmil.synth import surrogate_pair

log = logging.getLogger(__name__)

LOG_FIELDS = [
    "step",
    "cls",
    "emb",
    "score",
    "total",
    "lr",
    "grad_norm",
    "clip_scale",
    "neg_fallbacks",
    "bag_shortfall",
]


@dataclass
class TrainingConfig:
    batch_size: int = 16
    bag_size: int = 512
    total_updates: int = 20000
    checkpoint_every: int = 500
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    # patient attribute the epochs are balanced on: "class_label" or "stratum"
    balance_key: str = "class_label"
    dropout: float = 0.2
    # feature-space distortion used to fabricate partners for unpaired scans
    surrogate_magnitude: float = 1.0
    # when lam == 0, skip computing the (unweighted) robustness terms
    skip_zero_weight_terms: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("TrainingConfig.batch_size must be >= 1")
        if self.bag_size < 1:
            raise ConfigError("TrainingConfig.bag_size must be >= 1")
        if self.total_updates < 3:
            raise ConfigError("TrainingConfig.total_updates must be >= 3")
        if self.checkpoint_every < 1:
            raise ConfigError("TrainingConfig.checkpoint_every must be >= 1")
        if self.balance_key not in ("class_label", "stratum"):
            raise ConfigError(f"TrainingConfig.balance_key must be class_label or stratum, got {self.balance_key!r}")
        if self.surrogate_magnitude < 0:
            raise ConfigError("TrainingConfig.surrogate_magnitude must be >= 0")
        self.loss.validate()
        self.effective_optim().validate()

    def effective_optim(self) -> OptimConfig:
        return replace(self.optim, total_updates=self.total_updates)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainingConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"TrainingConfig: unknown field(s) {sorted(unknown)}")
        d = dict(d)
        try:
            if isinstance(d.get("loss"), dict):
                d["loss"] = LossConfig(**d["loss"])
            if isinstance(d.get("optim"), dict):
                d["optim"] = OptimConfig(**d["optim"])
        except TypeError as exc:
            raise ConfigError(f"TrainingConfig.loss/optim: {exc}") from exc
        return cls(**d)

    def digest(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj: Any) -> str:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    seed: int
    steps: list[dict[str, float]] = field(default_factory=list)
    # (update count, path or None when kept in memory)
    checkpoints: list[tuple[int, str | None]] = field(default_factory=list)
    negative_fallbacks: int = 0
    bag_shortfall: int = 0
    run_dir: str | None = None
    # in-memory checkpoints for runs without a directory
    memory_checkpoints: dict[int, bytes] = field(default_factory=dict, repr=False)

    def trace(self, key: str) -> np.ndarray:
        return np.array([s[key] for s in self.steps])

    def summary(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_steps": len(self.steps),
            # file names relative to the run directory, so a moved run stays valid
            "checkpoints": [{"update": u, "file": None if p is None else Path(p).name} for u, p in self.checkpoints],
            "negative_fallbacks": self.negative_fallbacks,
            "bag_shortfall": self.bag_shortfall,
        }


# ----------------------------------------------------------------------
# sampling


def _balance_value(p: PatientRecord, key: str) -> int:
    v = getattr(p, key)
    if v is None:
        raise ConfigError(f"patient {p.patient_id} has no {key} to balance on")
    return int(v)


def balance_epoch(
    patients: Sequence[PatientRecord], rng: np.random.Generator, key: str = "class_label"
) -> list[str]:
    """One epoch of patient ids with every group oversampled to the largest.

    Minority groups are topped up by uniform sampling with replacement; each
    original patient appears at least once. The list is shuffled.
    """
    groups: dict[int, list[str]] = defaultdict(list)
    for p in patients:
        groups[_balance_value(p, key)].append(p.patient_id)
    if len(groups) < 2:
        raise ConfigError(f"balancing on {key} needs at least two nonempty groups, got {sorted(groups)}")
    target = max(len(g) for g in groups.values())
    out: list[str] = []
    for value in sorted(groups):
        ids = groups[value]
        out.extend(ids)
        extra = target - len(ids)
        if extra:
            out.extend(ids[i] for i in rng.integers(len(ids), size=extra))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def sample_bag(
    pair: ScanPair, bag_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Pick min(bag_size, n) correspondences without replacement.

    Returns (bag_a, bag_b) with ``bag_a[i]`` and ``bag_b[i]`` corresponding.
    """
    corr = np.asarray(pair.correspondence)
    n = len(corr)
    if n == 0:
        raise DataError(f"pair ({pair.scan_a.scan_id}, {pair.scan_b.scan_id}) has no corresponding tiles")
    rows = rng.choice(n, size=min(bag_size, n), replace=False)
    chosen = corr[rows]
    return pair.scan_a.features[chosen[:, 0]], pair.scan_b.features[chosen[:, 1]]


class _BatchSource:
    """Endless stream of balanced patient batches, re-balanced per epoch."""

    def __init__(self, ds: Dataset, cfg: TrainingConfig, rng: np.random.Generator):
        self.rng = rng
        self.cfg = cfg
        self.patients = ds.patients
        self.by_id = ds.patient_map()
        self.pairs: dict[str, list[ScanPair]] = defaultdict(list)
        for pr in ds.pairs:
            self.pairs[pr.patient_id].append(pr)
        # partner scans are fixed for the whole run, like features extracted once
        self.surrogates: dict[str, list[ScanPair]] = {}
        for p in ds.patients:
            if not self.pairs[p.patient_id]:
                self.surrogates[p.patient_id] = [
                    surrogate_pair(ds.scans[s], rng, cfg.surrogate_magnitude) for s in p.scans
                ]
        self.queue: list[str] = []
        self.epochs = 0

    def next_batch(self) -> list[tuple[PatientRecord, ScanPair]]:
        batch = []
        while len(batch) < self.cfg.batch_size:
            if not self.queue:
                self.queue = balance_epoch(self.patients, self.rng, self.cfg.balance_key)
                self.epochs += 1
            pid = self.queue.pop(0)
            options = self.pairs[pid] or self.surrogates[pid]
            batch.append((self.by_id[pid], options[int(self.rng.integers(len(options)))]))
        return batch


@dataclass
class StepBatch:
    """Packed tiles of one step: arm-a bags first, then arm-b bags."""

    x: np.ndarray
    offsets: np.ndarray
    labels: np.ndarray  # (2B,)
    patients: list[str]  # (2B,)
    scanners: list[str]  # (2B,)
    shortfall: int = 0

    @property
    def n_pairs(self) -> int:
        return len(self.labels) // 2


def build_step_batch(
    batch: Sequence[tuple[PatientRecord, ScanPair]], bag_size: int, rng: np.random.Generator
) -> StepBatch:
    bags_a, bags_b, shortfall = [], [], 0
    for _, pair in batch:
        a, b = sample_bag(pair, bag_size, rng)
        bags_a.append(a)
        bags_b.append(b)
        shortfall += max(0, bag_size - len(a))
    x, offsets = pack_bags(bags_a + bags_b)
    labels = np.array([p.class_label for p, _ in batch] * 2, dtype=np.int64)
    patients = [p.patient_id for p, _ in batch] * 2
    scanners = [pr.scan_a.scanner_id for _, pr in batch] + [pr.scan_b.scanner_id for _, pr in batch]
    return StepBatch(x, offsets, labels, patients, scanners, shortfall)


def _distinct_draws(rng: np.random.Generator, n: int, rows: int, k: int) -> np.ndarray:
    """(rows, k) indices into range(n), distinct within each row, uniform.

    Rows that drew a repeat are redrawn whole, which keeps every row a
    uniform sample without replacement.
    """
    pick = rng.integers(n, size=(rows, k))
    while True:
        srt = np.sort(pick, axis=1)
        bad = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
        if len(bad) == 0:
            return srt
        pick[bad] = rng.integers(n, size=(len(bad), k))


def sample_negatives(
    sb: StepBatch, n_negatives: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, int]:
    """Negative tile rows for every anchor of both arms.

    Negatives for an anchor come from bags of other patients imaged on the
    anchor's scanner, drawn without replacement and redrawn per anchor. If
    the batch has fewer than ``n_negatives`` such tiles, tiles of any other
    patient are used instead and the event is counted.
    """
    n_bags = len(sb.offsets) - 1
    B = n_bags // 2
    rows = [np.arange(sb.offsets[k], sb.offsets[k + 1]) for k in range(n_bags)]
    negs: list[np.ndarray] = []
    fallbacks = 0
    for k in range(n_bags):
        same = [j for j in range(n_bags) if sb.patients[j] != sb.patients[k] and sb.scanners[j] == sb.scanners[k]]
        pool = np.concatenate([rows[j] for j in same]) if same else np.empty(0, dtype=np.int64)
        if len(pool) < n_negatives:
            fallbacks += 1
            other = [j for j in range(n_bags) if sb.patients[j] != sb.patients[k]]
            if not other:
                raise DataError("every bag in the batch belongs to one patient; no negatives available")
            pool = np.concatenate([rows[j] for j in other])
        n_anchor = len(rows[k])
        if len(pool) >= n_negatives:
            pick = _distinct_draws(rng, len(pool), n_anchor, n_negatives)
        else:
            pick = rng.integers(len(pool), size=(n_anchor, n_negatives))
        negs.append(pool[pick])
    neg_a = np.concatenate(negs[:B])
    neg_b = np.concatenate(negs[B:])
    return neg_a, neg_b, fallbacks


@dataclass
class StepResult:
    cls: float
    emb: float
    score: float
    total: float
    grads: dict[str, np.ndarray]


def step_loss_and_grads(
    net: MilNetwork,
    sb: StepBatch,
    loss_cfg: LossConfig,
    neg_a: np.ndarray | None,
    neg_b: np.ndarray | None,
    rng: np.random.Generator | None = None,
    dropout_mask: np.ndarray | None = None,
    update_stats: bool = True,
    compute_robust: bool = True,
    with_grads: bool = True,
) -> StepResult:
    """Forward both arms as one batch, assemble the total loss, backprop."""
    res = net.forward(sb.x, sb.offsets, train=True, rng=rng, dropout_mask=dropout_mask, update_stats=update_stats)
    B = sb.n_pairs
    cls, dlogits = classification_loss(res.logits, sb.labels)
    emb = score = 0.0
    dz = None
    w_emb, w_score = loss_cfg.embedding_weight, loss_cfg.score_weight
    if compute_robust:
        score, (ga, gb) = score_loss(res.logits[:B], res.logits[B:])
        dlogits = dlogits + w_score * np.concatenate([ga, gb])
        n_a = int(sb.offsets[B])
        idx_a = np.arange(n_a)
        idx_b = idx_a + n_a
        emb, dz_emb = embedding_loss_indexed(res.tile_embeddings, idx_a, idx_b, neg_a, neg_b, loss_cfg.temperature)
        dz = w_emb * dz_emb
    total = total_loss(cls, emb, score, w_emb, w_score)
    if not with_grads:
        return StepResult(cls, emb, score, total, {})
    grads = net.backward(res, dlogits.astype(net.dtype), None if dz is None else dz.astype(net.dtype))
    return StepResult(cls, emb, score, total, grads)


# ----------------------------------------------------------------------
# the run


def _check_trainable(ds: Dataset, cfg: TrainingConfig) -> None:
    problems = validate_dataset(ds)
    if problems:
        raise DataError("dataset failed validation: " + "; ".join(problems[:5]))
    unlabeled = [p.patient_id for p in ds.patients if p.class_label is None]
    if unlabeled:
        raise DataError(f"training patients without class_label: {unlabeled[:5]}")


def _format(v: Any) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def log_csv(steps: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_FIELDS)
    for s in steps:
        w.writerow([_format(s[k]) for k in LOG_FIELDS])
    return buf.getvalue()


def checkpoint_name(update: int) -> str:
    return f"ckpt_{update:06d}"


def train_run(
    ds: Dataset,
    cfg: TrainingConfig,
    run_dir: str | Path | None = None,
    run_id: str | None = None,
    overwrite: bool = False,
) -> RunRecord:
    """Train one network; deterministic given (dataset, cfg).

    With ``run_dir`` the directory receives ``config.json``, ``log.csv`` and
    ``ckpt_<update>`` files; otherwise checkpoints are kept in memory.
    """
    cfg.validate()
    _check_trainable(ds, cfg)
    optim = cfg.effective_optim()
    digest = cfg.digest()
    record = RunRecord(run_id or f"run-{digest}", digest, cfg.seed)
    out: Path | None = None
    if run_dir is not None:
        out = Path(run_dir)
        if (out / "config.json").exists() and not overwrite:
            raise ConfigError(f"run directory {out} already holds a run (use overwrite to replace it)")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
        record.run_dir = str(out)

    rng = np.random.default_rng([cfg.seed, 1])
    # own stream, so skipping the robustness terms leaves the other draws unchanged
    neg_rng = np.random.default_rng([cfg.seed, 2])
    net = MilNetwork(ds.feature_dim, dropout=cfg.dropout, seed=cfg.seed)
    source = _BatchSource(ds, cfg, rng)
    velocity: dict[str, np.ndarray] = {}
    lam_zero = cfg.loss.embedding_weight == 0 and cfg.loss.score_weight == 0
    compute_robust = not (lam_zero and cfg.skip_zero_weight_terms)

    def save(update: int) -> None:
        blob = checkpoint_bytes(net, update, digest)
        if out is not None:
            path = out / checkpoint_name(update)
            path.write_bytes(blob)
            record.checkpoints.append((update, str(path)))
        else:
            record.memory_checkpoints[update] = blob
            record.checkpoints.append((update, None))

    try:
        for update in range(1, cfg.total_updates + 1):
            sb = build_step_batch(source.next_batch(), cfg.bag_size, rng)
            neg_a = neg_b = None
            fallbacks = 0
            if compute_robust:
                neg_a, neg_b, fallbacks = sample_negatives(sb, cfg.loss.n_negatives, neg_rng)
            step = step_loss_and_grads(net, sb, cfg.loss, neg_a, neg_b, rng=rng, compute_robust=compute_robust)
            if not math.isfinite(step.total):
                raise NumericError("non-finite loss", update)
            raw_norm = global_norm(step.grads)
            grads, scale = clip_gradients(step.grads, optim.clip_norm, update, norm=raw_norm)
            lr = lr_at(update - 1, optim)
            sgd_step(net.params, grads, velocity, lr, optim, decays=MilNetwork.decays)
            record.negative_fallbacks += fallbacks
            record.bag_shortfall += sb.shortfall
            record.steps.append(
                {
                    "step": update,
                    "cls": step.cls,
                    "emb": step.emb,
                    "score": step.score,
                    "total": step.total,
                    "lr": lr,
                    "grad_norm": raw_norm,
                    "clip_scale": scale,
                    "neg_fallbacks": fallbacks,
                    "bag_shortfall": sb.shortfall,
                }
            )
            if update % cfg.checkpoint_every == 0:
                save(update)
    finally:
        if out is not None:
            (out / "log.csv").write_text(log_csv(record.steps))
            (out / "run.json").write_text(json.dumps(record.summary(), sort_keys=True, indent=1))
    if record.negative_fallbacks:
        log.info("%s: %d negative-sampling fallbacks", record.run_id, record.negative_fallbacks)
    return record


def iter_checkpoints(record: RunRecord) -> Iterator[tuple[int, MilNetwork]]:
    """Yield (update, network) for every checkpoint of a run, in order."""
    for update, path in record.checkpoints:
        if path is not None:
            net, _ = load_checkpoint(path)
        else:
            net, _ = checkpoint_from_bytes(record.memory_checkpoints[update], record.run_id)
        yield update, net
