"""Robustness and performance metrics, combined score, checkpoint selection."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from robustmil.errors import ConfigError, DataError

K_SELECTION = 0.627
CLASS_THRESHOLD = 0.5


@dataclass
class ScoreMatrix:
    """Scan scores indexed by patient (rows) and scanner (columns); NaN = missing."""

    patients: list[str]
    scanners: list[str]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.patients), len(self.scanners)):
            raise DataError(f"score matrix shape {self.values.shape} does not match labels")
        present = self.values[~np.isnan(self.values)]
        if np.any((present < 0) | (present > 1)):
            raise DataError("scores must lie in [0, 1]")

    @classmethod
    def from_records(cls, records: Sequence[tuple[str, str, float]]) -> ScoreMatrix:
        """Build from (patient_id, scanner_id, score) triples."""
        patients = sorted({r[0] for r in records})
        scanners = sorted({r[1] for r in records})
        pi = {p: i for i, p in enumerate(patients)}
        si = {s: j for j, s in enumerate(scanners)}
        values = np.full((len(patients), len(scanners)), np.nan)
        for p, s, v in records:
            if not np.isnan(values[pi[p], si[s]]):
                raise DataError(f"duplicate score for patient {p} on scanner {s}")
            values[pi[p], si[s]] = v
        return cls(patients, scanners, values)

    def patient_scores(self) -> np.ndarray:
        """Mean over the scanners present for each patient."""
        return np.nanmean(self.values, axis=1)

    def classes(self) -> np.ndarray:
        """0/1 per entry (score > 0.5 is class 1); -1 where missing."""
        return np.where(np.isnan(self.values), -1, classify(np.nan_to_num(self.values)))


def classify(scores: np.ndarray) -> np.ndarray:
    """score <= 0.5 -> 0, score > 0.5 -> 1."""
    return (np.asarray(scores) > CLASS_THRESHOLD).astype(np.int64)


def per_patient_std(m: ScoreMatrix) -> np.ndarray:
    """Population std over scanners per patient; NaN when < 2 scores."""
    v = m.values
    counts = (~np.isnan(v)).sum(axis=1)
    out = np.full(len(v), np.nan)
    ok = counts >= 2
    if ok.any():
        out[ok] = np.nanstd(v[ok], axis=1)
    return out


def inconsistency(m: ScoreMatrix, reference: ScoreMatrix) -> float:
    """Mean per-patient score std over scanners, relative to the reference std.

    Patients with fewer than two scores are left out. Both deviations are
    population (ddof = 0) standard deviations.
    """
    sigma_p = per_patient_std(m)
    sigma_p = sigma_p[~np.isnan(sigma_p)]
    if len(sigma_p) == 0:
        raise DataError("inconsistency needs at least one patient with two or more scanner scores")
    ref = reference.values[~np.isnan(reference.values)]
    if len(ref) == 0:
        raise DataError("reference score matrix is empty")
    sigma_t = float(np.std(ref))
    if sigma_t == 0:
        raise DataError("degenerate reference: all reference scores are equal")
    return float(sigma_p.mean() / sigma_t)


def classification_agreement(classes: np.ndarray) -> float:
    """Average over scanner pairs of the fraction of patients classified alike.

    ``classes`` is (patients, scanners) with 0/1 entries and -1 for missing.
    A patient missing either scanner of a pair is left out of that pair's
    denominator; pairs with no shared patient are skipped.
    """
    c = np.asarray(classes)
    if c.ndim != 2 or c.shape[1] < 2:
        raise DataError("classification agreement needs at least two scanners")
    fractions = []
    for i, j in combinations(range(c.shape[1]), 2):
        both = (c[:, i] >= 0) & (c[:, j] >= 0)
        if both.any():
            fractions.append(float(np.mean(c[both, i] == c[both, j])))
    if not fractions:
        raise DataError("no scanner pair shares a patient")
    return float(np.mean(fractions))


def c_index(scores: np.ndarray, times: np.ndarray, events: np.ndarray) -> float:
    """Harrell's concordance; higher score means higher risk (earlier event).

    Pair (i, j) is comparable when t_i < t_j and i had the event. Score ties
    count one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    e = np.asarray(events, dtype=bool)
    if not (s.shape == t.shape == e.shape):
        raise DataError("scores, times and events must have equal length")
    comparable = e[:, None] & (t[:, None] < t[None, :])
    n = int(comparable.sum())
    if n == 0:
        raise DataError("no comparable pairs for the c-index")
    diff = s[:, None] - s[None, :]
    concordant = ((diff > 0) & comparable).sum() + 0.5 * ((diff == 0) & comparable).sum()
    return float(concordant / n)


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC via the Mann-Whitney statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def combined_score(perf: float, inc: float, k: float = K_SELECTION) -> float:
    """perf - k * inconsistency."""
    return perf - k * inc


def select_checkpoint(
    table: Sequence[dict], task: str, k: float = K_SELECTION
) -> dict:
    """Pick the checkpoint row to keep for one run.

    ``table`` rows carry ``checkpoint`` plus, for the survival task,
    ``perf`` and ``inconsistency`` on the tuning data. Survival keeps the
    argmax of the combined score (earliest on ties); LNM keeps the last.
    """
    if not table:
        raise DataError("run has no checkpoints")
    if task == "lnm":
        return table[-1]
    if task != "survival":
        raise ConfigError(f"unknown task {task!r}; expected 'survival' or 'lnm'")
    best, best_val = None, -np.inf
    for row in table:
        if row.get("perf") is None or row.get("inconsistency") is None:
            raise DataError("survival checkpoint selection needs tuning-set perf and inconsistency")
        val = combined_score(row["perf"], row["inconsistency"], k)
        if val > best_val:
            best, best_val = row, val
    return best


def best_lambda(per_run: Sequence[dict]) -> tuple[float, dict[float, float]]:
    """Lambda with the highest mean combined score over its runs.

    ``per_run`` rows carry ``lam`` and ``combined``. Ties go to the lambda
    listed first.
    """
    if not per_run:
        raise DataError("no runs to choose a lambda from")
    order: list[float] = []
    sums: dict[float, list[float]] = {}
    for row in per_run:
        if row["lam"] not in sums:
            order.append(row["lam"])
            sums[row["lam"]] = []
        sums[row["lam"]].append(row["combined"])
    means = {lam: float(np.mean(sums[lam])) for lam in order}
    best = order[0]
    for lam in order[1:]:
        if means[lam] > means[best]:
            best = lam
    return best, means
