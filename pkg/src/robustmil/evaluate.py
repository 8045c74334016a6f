"""Scoring datasets with a trained network and turning scores into metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Any

import numpy as np

from robustmil.core import Dataset
from robustmil.errors import ConfigError, DataError
from robustmil.metrics import (
    K_SELECTION,
    ScoreMatrix,
    auc,
    c_index,
    classification_agreement,
    classify,
    combined_score,
    inconsistency,
    select_checkpoint,
)
from robustmil.net import MilNetwork
from robustmil.train import RunRecord, iter_checkpoints

TASKS = ("survival", "lnm")
# outcome runs balance epochs on the class label, LNM runs on the T-stage stratum
TASK_BALANCE_KEY = {"survival": "class_label", "lnm": "stratum"}


@dataclass
class ScanScore:
    patient_id: str
    scanner_id: str
    scan_id: str
    score: float

    @property
    def cls(self) -> int:
        return int(classify(self.score))


def score_dataset(net: MilNetwork, ds: Dataset, chunk: int = 64) -> list[ScanScore]:
    """Eval-mode score of every scan (all tiles of a scan form one bag)."""
    ids = [sid for p in ds.patients for sid in p.scans]
    out: list[ScanScore] = []
    for start in range(0, len(ids), chunk):
        part = ids[start : start + chunk]
        scores = net.scan_scores([ds.scans[s].features for s in part])
        for sid, sc in zip(part, scores):
            scan = ds.scans[sid]
            out.append(ScanScore(scan.patient_id, scan.scanner_id, sid, float(sc)))
    return out


def score_matrix(scores: list[ScanScore]) -> ScoreMatrix:
    return ScoreMatrix.from_records([(s.patient_id, s.scanner_id, s.score) for s in scores])


def performance(m: ScoreMatrix, ds: Dataset, task: str) -> tuple[str, float]:
    """c-index (survival) or AUC (lnm) of the scanner-averaged patient scores."""
    pmap = ds.patient_map()
    ps = m.patient_scores()
    if task == "survival":
        times = np.array([pmap[p].survival_time for p in m.patients], dtype=np.float64)
        events = np.array([bool(pmap[p].event) for p in m.patients])
        if np.any(np.isnan(times)):
            raise DataError("survival task needs survival_time for every patient")
        return "c_index", c_index(ps, times, events)
    if task == "lnm":
        labels = np.array([pmap[p].class_label for p in m.patients])
        return "auc", auc(ps, labels)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def evaluate_scores(
    m: ScoreMatrix, ds: Dataset, reference: ScoreMatrix, task: str, k: float = K_SELECTION
) -> dict[str, Any]:
    """All metrics for one score matrix; inconsistency is relative to ``reference``."""
    metric, perf = performance(m, ds, task)
    out: dict[str, Any] = {
        "task": task,
        "n_patients": len(m.patients),
        "n_scanners": len(m.scanners),
        "perf_metric": metric,
        "perf": perf,
    }
    n_multi = int(((~np.isnan(m.values)).sum(axis=1) >= 2).sum())
    out["n_patients_multi_scan"] = n_multi
    if len(m.scanners) < 2 or n_multi == 0:
        reason = "fewer than two scanners" if len(m.scanners) < 2 else "no patient has two or more scans"
        out.update(
            inconsistency=None,
            inconsistency_reason=reason,
            classification_agreement=None,
            classification_agreement_reason=reason,
            combined=None,
        )
        return out
    inc = inconsistency(m, reference)
    out["inconsistency"] = inc
    out["classification_agreement"] = classification_agreement(m.classes())
    out["combined"] = combined_score(perf, inc, k)
    return out


def evaluate_network(
    net: MilNetwork, ds: Dataset, task: str, reference_ds: Dataset | None = None, k: float = K_SELECTION
) -> tuple[dict[str, Any], list[ScanScore]]:
    """Score ``ds`` and compute its metrics.

    The inconsistency denominator comes from the scores of ``reference_ds``
    (the tuning set), or of ``ds`` itself when no reference is given.
    """
    scores = score_dataset(net, ds)
    m = score_matrix(scores)
    ref = m if reference_ds is None else score_matrix(score_dataset(net, reference_ds))
    return evaluate_scores(m, ds, ref, task, k), scores


def checkpoint_table(record: RunRecord, tune_ds: Dataset, task: str, k: float = K_SELECTION) -> list[dict]:
    rows = []
    for update, net in iter_checkpoints(record):
        metrics, _ = evaluate_network(net, tune_ds, task, None, k)
        rows.append(
            {
                "checkpoint": update,
                "perf": metrics["perf"],
                "inconsistency": metrics["inconsistency"],
                "combined": metrics["combined"],
            }
        )
    return rows


def select_run_checkpoint(
    record: RunRecord, task: str, tune_ds: Dataset | None = None, k: float = K_SELECTION
) -> tuple[int, MilNetwork]:
    """Survival: best combined score on the tuning set. LNM: last checkpoint."""
    if not record.checkpoints:
        raise DataError(f"run {record.run_id} has no checkpoints")
    if task == "lnm":
        update, net = list(iter_checkpoints(record))[-1]
        return update, net
    if task != "survival":
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if tune_ds is None:
        raise DataError("survival checkpoint selection needs a tuning dataset")
    table = checkpoint_table(record, tune_ds, task, k)
    chosen = select_checkpoint(table, task, k)["checkpoint"]
    for update, net in iter_checkpoints(record):
        if update == chosen:
            return update, net
    raise AssertionError("selected checkpoint vanished")


def scores_csv(scores: list[ScanScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "scanner_id", "scan_id", "score", "class"])
    for s in scores:
        w.writerow([s.patient_id, s.scanner_id, s.scan_id, repr(s.score), s.cls])
    return buf.getvalue()
