"""Command-line entry point: generate, train, sweep, evaluate, probe, report.

Every subcommand reads one JSON experiment config (``--config`` or the
``ROBUSTMIL_CONFIG`` environment variable; built-in defaults otherwise).
``--set section.field=value`` overrides a field by dotted path, the value
parsed as JSON when possible. Exit codes: 0 ok, 2 config error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import ctypes
import ctypes.util
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from robustmil.core import load_dataset, save_dataset, validate_dataset
from robustmil.errors import ConfigError, DataError, RobustMilError
from robustmil.evaluate import TASK_BALANCE_KEY, TASKS, evaluate_network, scores_csv
from robustmil.metrics import K_SELECTION
from robustmil.net import load_checkpoint
from robustmil.probe import (
    ProbeConfig,
    confusion_matrix,
    embedding_probe_set,
    layer_cosine_report,
    per_class_accuracy,
    probe_accuracy,
    raw_probe_set,
    train_scanner_probe,
)
from robustmil.sweep import DEFAULT_LAMBDA_GRID, SweepConfig, report_csv, sweep
from robustmil.synth import GeneratorConfig, generate_cohort
from robustmil.train import TrainingConfig, train_run

CONFIG_ENV = "ROBUSTMIL_CONFIG"
log = logging.getLogger("robustmil")


def default_config() -> dict[str, Any]:
    return {
        "task": "survival",
        "paths": {
            "dataset": "data/train",
            "tune_dataset": "data/tune",
            "test_dataset": "data/test",
            "run_dir": "runs/run",
            "sweep_dir": "runs/sweep",
            "checkpoint": None,
            "compare_checkpoint": None,
            "out_dir": "out",
        },
        "generator": GeneratorConfig().to_dict(),
        "training": TrainingConfig().to_dict(),
        "sweep": {"lambdas": list(DEFAULT_LAMBDA_GRID), "runs_per_lambda": 20, "k": K_SELECTION, "seed": 0, "jobs": 1},
        "probe": asdict(ProbeConfig()),
        "report": {"out": None},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.path=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like section.field=value")
    path, text = assignment.split("=", 1)
    keys = path.split(".")
    node = cfg
    for i, key in enumerate(keys[:-1]):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {'.'.join(keys[: i + 1])}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"unknown config key {path}")
    node[keys[-1]] = _parse_value(text)


def load_config(path: str | None, overrides: Sequence[str] = (), seed: int | None = None) -> dict[str, Any]:
    cfg = default_config()
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {p} must hold a JSON object")
        cfg = _merge(cfg, user)
    for assignment in overrides:
        apply_override(cfg, assignment)
    if seed is not None:
        # the world (scanner and biology directions) stays fixed; --seed redraws patients
        for section in ("generator", "training", "sweep", "probe"):
            cfg[section]["seed"] = seed
    if cfg["task"] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg['task']!r}")
    return cfg


def _path(cfg: dict, key: str) -> Path:
    value = cfg["paths"].get(key)
    if not value:
        raise ConfigError(f"paths.{key} is not set")
    return Path(value)


def _existing(cfg: dict, key: str, what: str) -> Path:
    p = _path(cfg, key)
    if not p.exists():
        raise DataError(f"{what} not found: expected it at {p} (paths.{key})")
    return p


def _writable(path: Path, overwrite: bool) -> Path:
    if path.exists() and not overwrite:
        raise ConfigError(f"{path} already exists; pass --overwrite to replace it")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _training(cfg: dict) -> TrainingConfig:
    tc = TrainingConfig.from_dict(cfg["training"])
    tc.balance_key = TASK_BALANCE_KEY[cfg["task"]]
    return tc


def _emit(obj: dict[str, Any]) -> None:
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: dict, args: argparse.Namespace) -> int:
    gen = GeneratorConfig.from_dict(cfg["generator"])
    ds = generate_cohort(gen)
    out = save_dataset(ds, _path(cfg, "dataset"), overwrite=args.overwrite)
    _emit(
        {
            "dataset": str(out),
            "patients": len(ds.patients),
            "scans": len(ds.scans),
            "pairs": len(ds.pairs),
            "dim": ds.feature_dim,
            "scanners": ds.scanners,
        }
    )
    return 0


def _load(cfg: dict, key: str, what: str):
    ds = load_dataset(_existing(cfg, key, what))
    problems = validate_dataset(ds)
    if problems:
        raise DataError(f"{what} failed validation: " + "; ".join(problems[:5]))
    return ds


def cmd_train(cfg: dict, args: argparse.Namespace) -> int:
    ds = _load(cfg, "dataset", "training dataset")
    record = train_run(ds, _training(cfg), _path(cfg, "run_dir"), overwrite=args.overwrite)
    _emit(record.summary())
    return 0


def cmd_sweep(cfg: dict, args: argparse.Namespace) -> int:
    train_ds = _load(cfg, "dataset", "training dataset")
    tune_ds = _load(cfg, "tune_dataset", "tuning dataset")
    test_ds = None
    if cfg["paths"].get("test_dataset") and Path(cfg["paths"]["test_dataset"]).exists():
        test_ds = _load(cfg, "test_dataset", "test dataset")
    s = dict(cfg["sweep"])
    jobs = int(args.jobs if args.jobs is not None else s.pop("jobs", 1))
    s.pop("jobs", None)
    try:
        scfg = SweepConfig(task=cfg["task"], **s)
    except TypeError as exc:
        raise ConfigError(f"sweep section: {exc}") from exc
    result = sweep(train_ds, _training(cfg), scfg, tune_ds, test_ds, _path(cfg, "sweep_dir"), jobs, args.overwrite)
    _emit(
        {
            "sweep_dir": str(_path(cfg, "sweep_dir")),
            "runs": len(result.runs),
            "best_lambda": result.best_lambda,
            "mean_combined": {repr(k): v for k, v in result.lambda_means.items()},
        }
    )
    return 0


def cmd_evaluate(cfg: dict, args: argparse.Namespace) -> int:
    ckpt = _existing(cfg, "checkpoint", "checkpoint")
    ds = _load(cfg, "dataset", "evaluation dataset")
    ref = None
    if cfg["paths"].get("tune_dataset") and Path(cfg["paths"]["tune_dataset"]).exists():
        ref = _load(cfg, "tune_dataset", "reference dataset")
    net, header = load_checkpoint(ckpt, expected_in_dim=ds.feature_dim)
    metrics, scores = evaluate_network(net, ds, cfg["task"], ref, cfg["sweep"]["k"])
    metrics["checkpoint"] = str(ckpt)
    metrics["update"] = header.get("update")
    metrics["reference"] = "tune_dataset" if ref is not None else "dataset"
    out = _path(cfg, "out_dir")
    m_path = _writable(out / "metrics.json", args.overwrite)
    s_path = _writable(out / "scores.csv", args.overwrite)
    m_path.write_text(json.dumps(metrics, sort_keys=True, indent=1))
    s_path.write_text(scores_csv(scores))
    _emit(metrics)
    return 0


def _probe_summary(probe, train_set, test_set) -> dict[str, Any]:
    return {
        "classes": probe.classes,
        "converged": probe.converged,
        "iterations": probe.iterations,
        "train_accuracy": probe_accuracy(probe, train_set),
        "heldout_accuracy": probe_accuracy(probe, test_set),
        "per_scanner_accuracy": per_class_accuracy(probe, test_set),
        "confusion_matrix": confusion_matrix(probe, test_set).tolist(),
    }


def cmd_probe(cfg: dict, args: argparse.Namespace) -> int:
    pcfg = ProbeConfig(**cfg["probe"])
    pcfg.validate()
    train_ds = _load(cfg, "dataset", "probe training dataset")
    test_ds = _load(cfg, "test_dataset", "held-out probe dataset")
    out = _path(cfg, "out_dir")
    p_path = _writable(out / "probe.json", args.overwrite)
    result: dict[str, Any] = {}
    tr = raw_probe_set(train_ds, pcfg.tiles_per_scan, pcfg.seed)
    te = raw_probe_set(test_ds, pcfg.tiles_per_scan, pcfg.seed + 1)
    result["raw"] = _probe_summary(train_scanner_probe(tr, pcfg), tr, te)
    nets = {}
    for key in ("checkpoint", "compare_checkpoint"):
        if cfg["paths"].get(key):
            net, _ = load_checkpoint(_existing(cfg, key, "checkpoint"), expected_in_dim=train_ds.feature_dim)
            nets[key] = net
            tr_e = embedding_probe_set(net, train_ds, pcfg.tiles_per_scan, pcfg.seed)
            te_e = embedding_probe_set(net, test_ds, pcfg.tiles_per_scan, pcfg.seed + 1)
            result[key] = _probe_summary(train_scanner_probe(tr_e, pcfg), tr_e, te_e)
    if len(nets) == 2:
        c_path = _writable(out / "cosine.csv", args.overwrite)
        report = layer_cosine_report(
            nets["checkpoint"], nets["compare_checkpoint"], test_ds, ("checkpoint", "compare_checkpoint")
        )
        result["cosine_medians"] = [
            {"network": n, "layer": t, "pair_type": k, "median": v} for (n, t, k), v in report.medians().items()
        ]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["network", "layer", "pair_type", "scan_a", "scan_b", "similarity"])
        for row in report.rows():
            w.writerow([row["network"], row["layer"], row["pair_type"], row["scan_a"], row["scan_b"], repr(row["similarity"])])
        c_path.write_text(buf.getvalue())
    p_path.write_text(json.dumps(result, sort_keys=True, indent=1))
    _emit({"raw_heldout_accuracy": result["raw"]["heldout_accuracy"], "probe_json": str(p_path)})
    return 0


def cmd_report(cfg: dict, args: argparse.Namespace) -> int:
    sdir = _existing(cfg, "sweep_dir", "sweep directory")
    summary_path = sdir / "sweep.json"
    if not summary_path.is_file():
        raise DataError(f"sweep summary not found: expected it at {summary_path}")
    summary = json.loads(summary_path.read_text())
    text = report_csv(summary)
    out = Path(cfg["report"]["out"]) if cfg["report"].get("out") else sdir / "report.csv"
    _writable(out, args.overwrite).write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "generate": (cmd_generate, "generate a synthetic cohort into paths.dataset"),
    "train": (cmd_train, "train one network on paths.dataset into paths.run_dir"),
    "sweep": (cmd_sweep, "train runs over a lambda grid into paths.sweep_dir"),
    "evaluate": (cmd_evaluate, "score paths.dataset with paths.checkpoint"),
    "probe": (cmd_probe, "linear scanner probes and per-layer similarity"),
    "report": (cmd_report, "per-lambda CSV table from a sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robustmil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help=f"JSON experiment config (default: ${CONFIG_ENV})")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE", help="override a config field")
        p.add_argument("--seed", type=int, help="seed for every stochastic component")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        if name == "sweep":
            p.add_argument("--jobs", type=int, help="concurrent training runs")
    return parser


# glibc mallopt parameters
_M_TRIM_THRESHOLD, _M_TOP_PAD, _M_MMAP_THRESHOLD = -1, -2, -3


def tune_allocator() -> bool:
    """Keep freed array buffers on the heap instead of handing them back to the OS.

    A training step allocates dozens of short-lived ~1 MB arrays. Under glibc
    defaults many are mmapped and page-faulted afresh, which can cost more
    than the arithmetic. Returns False where this does not apply.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        settings = ((_M_MMAP_THRESHOLD, 64 << 20), (_M_TRIM_THRESHOLD, 256 << 20), (_M_TOP_PAD, 64 << 20))
        return all(libc.mallopt(param, value) == 1 for param, value in settings)
    except (OSError, AttributeError):
        return False


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    # forked sweep workers inherit the setting
    tune_allocator()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return COMMANDS[args.command][0](cfg, args)
    except RobustMilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
