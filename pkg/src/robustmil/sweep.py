"""Lambda sweeps: many seeded runs per robustness weight, checkpoint selection,
per-run metrics and the best-lambda choice."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from robustmil.core import Dataset
from robustmil.errors import ConfigError, DataError
from robustmil.evaluate import TASK_BALANCE_KEY, TASKS, evaluate_network, scores_csv, select_run_checkpoint
from robustmil.metrics import K_SELECTION, best_lambda
from robustmil.train import TrainingConfig, train_run

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = (
    0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 2.5, 5.0, 7.5, 10.0, 12.5, 15.0, 20.0, 25.0,
    30.0, 40.0, 50.0, 75.0, 100.0, 125.0, 150.0, 200.0, 250.0, 400.0, 500.0, 600.0, 800.0, 1000.0,
)  # fmt: skip

REPORT_METRICS = (
    ("inconsistency", "inconsistency"),
    ("perf", "perf"),
    ("combined", "combined"),
    ("agreement", "classification_agreement"),
)


def report_fields(splits: Sequence[str]) -> list[str]:
    """CSV columns: lambda, run count, then mean and std of each metric per split."""
    return ["lam", "n_runs"] + [
        f"{split}_{name}_{stat}" for split in splits for name, _ in REPORT_METRICS for stat in ("mean", "std")
    ]


@dataclass
class SweepConfig:
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    runs_per_lambda: int = 20
    task: str = "survival"
    k: float = K_SELECTION
    seed: int = 0

    def validate(self) -> None:
        if not self.lambdas:
            raise ConfigError("SweepConfig.lambdas must not be empty")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigError("SweepConfig.lambdas must all be >= 0")
        if len(set(self.lambdas)) != len(self.lambdas):
            raise ConfigError("SweepConfig.lambdas must be distinct")
        if self.runs_per_lambda < 1:
            raise ConfigError("SweepConfig.runs_per_lambda must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"SweepConfig.task must be one of {TASKS}, got {self.task!r}")


def derive_seed(base_seed: int, lam_index: int, run_index: int) -> int:
    """Run seed from (base seed, lambda index, run index); 63-bit."""
    state = np.random.SeedSequence([base_seed, lam_index, run_index]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def lam_dirname(lam_index: int, lam: float) -> str:
    return f"lam{lam_index:02d}_{lam:g}"


@dataclass
class _Job:
    lam_index: int
    lam: float
    run_index: int
    cfg: TrainingConfig
    run_dir: str | None
    overwrite: bool


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _run_job(job: _Job, train_ds: Dataset, tune_ds: Dataset, test_ds: Dataset | None, task: str, k: float) -> dict:
    record = train_run(train_ds, job.cfg, job.run_dir, f"{lam_dirname(job.lam_index, job.lam)}-run{job.run_index:02d}", job.overwrite)
    update, net = select_run_checkpoint(record, task, tune_ds, k)
    tune_metrics, tune_scores = evaluate_network(net, tune_ds, task, None, k)
    row: dict[str, Any] = {
        "lam": job.lam,
        "lam_index": job.lam_index,
        "run_index": job.run_index,
        "seed": job.cfg.seed,
        "run_id": record.run_id,
        "config_hash": record.config_hash,
        "checkpoint": update,
        "negative_fallbacks": record.negative_fallbacks,
        "tune": tune_metrics,
        "combined": tune_metrics["combined"],
    }
    test_scores = None
    if test_ds is not None:
        row["test"], test_scores = evaluate_network(net, test_ds, task, tune_ds, k)
    if job.run_dir is not None:
        out = Path(job.run_dir)
        (out / "metrics.json").write_text(_dump({k_: v for k_, v in row.items() if k_ != "combined"}))
        (out / "scores_tune.csv").write_text(scores_csv(tune_scores))
        if test_scores is not None:
            (out / "scores_test.csv").write_text(scores_csv(test_scores))
    return row


def _run_job_star(args: tuple) -> dict:
    return _run_job(*args)


@dataclass
class SweepResult:
    config: SweepConfig
    runs: list[dict]
    best_lambda: float
    lambda_means: dict[float, float]

    def summary(self) -> dict[str, Any]:
        return {
            "config": asdict(self.config),
            "best_lambda": self.best_lambda,
            "mean_combined": [{"lam": lam, "combined": v} for lam, v in self.lambda_means.items()],
            "runs": self.runs,
        }


def sweep(
    train_ds: Dataset,
    base_cfg: TrainingConfig,
    cfg: SweepConfig,
    tune_ds: Dataset,
    test_ds: Dataset | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    overwrite: bool = False,
) -> SweepResult:
    """Train ``runs_per_lambda`` runs for every lambda and pick the best lambda.

    Each run keeps its selected checkpoint, is scored on the tuning set
    (which is also the inconsistency reference) and, when given, on the
    test set. The best lambda maximizes the mean tuning-set combined score.
    """
    cfg.validate()
    if jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {jobs}")
    if not any(len(p.scans) >= 2 for p in tune_ds.patients):
        raise DataError("the tuning set needs patients with two or more scans to measure inconsistency")
    base = replace(base_cfg, balance_key=TASK_BALANCE_KEY[cfg.task])
    root: Path | None = None
    if out_dir is not None:
        root = Path(out_dir)
        if (root / "sweep.json").exists() and not overwrite:
            raise ConfigError(f"sweep directory {root} already holds a sweep (use overwrite to replace it)")
        root.mkdir(parents=True, exist_ok=True)
    job_list = []
    for li, lam in enumerate(cfg.lambdas):
        for r in range(cfg.runs_per_lambda):
            run_cfg = replace(base, loss=replace(base.loss, lam=lam), seed=derive_seed(cfg.seed, li, r))
            run_dir = None if root is None else str(root / lam_dirname(li, lam) / f"run{r:02d}")
            job_list.append(_Job(li, lam, r, run_cfg, run_dir, overwrite))
    args = [(j, train_ds, tune_ds, test_ds, cfg.task, cfg.k) for j in job_list]
    if jobs == 1:
        runs = [_run_job_star(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_job_star, args))
    best, means = best_lambda(runs)
    result = SweepResult(cfg, runs, best, means)
    if root is not None:
        (root / "sweep.json").write_text(_dump(result.summary()))
    log.info("best lambda %g", best)
    return result


def _stats(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def _splits(summary: dict[str, Any]) -> list[str]:
    runs = summary["runs"]
    return ["tune"] + (["test"] if runs and "test" in runs[0] else [])


def report_rows(summary: dict[str, Any]) -> list[dict[str, Any]]:
    """One row per lambda: mean and std of every metric on every split."""
    lambdas: list[float] = []
    for run in summary["runs"]:
        if run["lam"] not in lambdas:
            lambdas.append(run["lam"])
    rows = []
    for lam in lambdas:
        runs = [r for r in summary["runs"] if r["lam"] == lam]
        row: dict[str, Any] = {"lam": lam, "n_runs": len(runs)}
        for split in _splits(summary):
            for name, key in REPORT_METRICS:
                mean, std = _stats([r[split][key] for r in runs])
                row[f"{split}_{name}_mean"], row[f"{split}_{name}_std"] = mean, std
        rows.append(row)
    return rows


def report_csv(summary: dict[str, Any]) -> str:
    fields = report_fields(_splits(summary))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in report_rows(summary):
        w.writerow(["" if row[f] is None else (repr(row[f]) if isinstance(row[f], float) else row[f]) for f in fields])
    return buf.getvalue()
