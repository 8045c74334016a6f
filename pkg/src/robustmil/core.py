"""Domain types, dataset validation and the on-disk dataset format.

A dataset directory holds ``manifest.json`` plus one raw little-endian
float32 blob per scan (``<scan_id>.f32``, row-major tiles x D).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from robustmil.errors import ConfigError, DataError, IntegrityError

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
FEATURE_DTYPE = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class ScanRecord:
    scan_id: str
    patient_id: str
    scanner_id: str
    site_id: str
    features: np.ndarray  # (n_tiles, D) float32
    coords: np.ndarray  # (n_tiles, 2) int64 grid coordinates

    @property
    def n_tiles(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])


@dataclass(frozen=True, eq=False)
class ScanPair:
    scan_a: ScanRecord
    scan_b: ScanRecord
    correspondence: np.ndarray  # (n, 2) int64: (index_in_a, index_in_b)

    @property
    def patient_id(self) -> str:
        return self.scan_a.patient_id


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    class_label: int | None
    scans: tuple[str, ...]
    survival_time: float | None = None
    event: bool | None = None
    # Secondary balancing key (e.g. T-stage for the LNM task).
    stratum: int | None = None


@dataclass(eq=False)
class Dataset:
    patients: list[PatientRecord]
    scans: dict[str, ScanRecord]
    pairs: list[ScanPair]
    feature_dim: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def patient_map(self) -> dict[str, PatientRecord]:
        return {p.patient_id: p for p in self.patients}

    @property
    def scanners(self) -> list[str]:
        return sorted({s.scanner_id for s in self.scans.values()})

    def unpaired_scans(self) -> list[ScanRecord]:
        """Scans that do not take part in any stored pair, in patient order."""
        paired = set()
        for pair in self.pairs:
            paired.add(pair.scan_a.scan_id)
            paired.add(pair.scan_b.scan_id)
        out = []
        for p in self.patients:
            out.extend(self.scans[s] for s in p.scans if s not in paired)
        return out


def _check_correspondence(corr: np.ndarray, n_a: int, n_b: int) -> str | None:
    if corr.ndim != 2 or corr.shape[1] != 2:
        return "correspondence must be an (n, 2) array"
    if corr.shape[0] == 0:
        return None
    if corr[:, 0].min() < 0 or corr[:, 0].max() >= n_a:
        return "correspondence index_in_a out of range"
    if corr[:, 1].min() < 0 or corr[:, 1].max() >= n_b:
        return "correspondence index_in_b out of range"
    if len(np.unique(corr[:, 0])) != len(corr) or len(np.unique(corr[:, 1])) != len(corr):
        return "correspondence is not one-to-one"
    return None


def validate_dataset(ds: Dataset) -> list[str]:
    """Return one human-readable description per invariant violation.

    An empty list means the dataset is well formed. Never raises on bad data
    and never mutates ``ds``.
    """
    problems: list[str] = []
    D = ds.feature_dim
    if not isinstance(D, int) or D <= 0:
        problems.append(f"dataset: feature_dim must be a positive integer, got {D!r}")

    for sid, scan in ds.scans.items():
        if sid != scan.scan_id:
            problems.append(f"scan {sid}: keyed under a different id than its scan_id {scan.scan_id}")
        f = scan.features
        if f.ndim != 2 or f.shape[0] == 0:
            problems.append(f"scan {sid}: tile_features must be a nonempty (n_tiles, D) array")
            continue
        if f.shape[1] != D:
            problems.append(f"scan {sid}: feature dimension {f.shape[1]} != dataset D {D}")
        if not np.all(np.isfinite(f)):
            problems.append(f"scan {sid}: non-finite feature values")
        c = scan.coords
        if c.shape != (f.shape[0], 2):
            problems.append(f"scan {sid}: tile_coords shape {c.shape} does not match {f.shape[0]} tiles")
        elif len({(int(x), int(y)) for x, y in c}) != len(c):
            problems.append(f"scan {sid}: duplicate tile_coords")

    owners: dict[str, list[str]] = {}
    seen_patients: set[str] = set()
    for p in ds.patients:
        if p.patient_id in seen_patients:
            problems.append(f"patient {p.patient_id}: duplicate patient_id")
        seen_patients.add(p.patient_id)
        # unlabelled patients are allowed here; training rejects them
        if p.class_label is not None and p.class_label not in (0, 1):
            problems.append(f"patient {p.patient_id}: class_label must be 0 or 1, got {p.class_label!r}")
        if p.event is not None:
            if p.survival_time is None or not (p.survival_time > 0):
                problems.append(f"patient {p.patient_id}: event present but survival_time missing or <= 0")
        for sid in p.scans:
            owners.setdefault(sid, []).append(p.patient_id)
            if sid not in ds.scans:
                problems.append(f"patient {p.patient_id}: references missing scan {sid}")
            elif ds.scans[sid].patient_id != p.patient_id:
                problems.append(f"scan {sid}: patient_id {ds.scans[sid].patient_id} disagrees with owner {p.patient_id}")
    for sid, who in owners.items():
        if len(who) > 1:
            problems.append(f"scan {sid}: referenced by {len(who)} patients ({', '.join(who)})")
    for sid in ds.scans:
        if sid not in owners:
            problems.append(f"scan {sid}: not referenced by any patient")

    for k, pair in enumerate(ds.pairs):
        a, b = pair.scan_a, pair.scan_b
        name = f"pair {k} ({a.scan_id}, {b.scan_id})"
        for s in (a, b):
            if s.scan_id not in ds.scans:
                problems.append(f"{name}: scan {s.scan_id} not in dataset")
        if a.patient_id != b.patient_id:
            problems.append(f"{name}: scans belong to different patients")
        if a.scanner_id == b.scanner_id:
            problems.append(f"{name}: both scans share scanner {a.scanner_id}")
        msg = _check_correspondence(np.asarray(pair.correspondence), a.n_tiles, b.n_tiles)
        if msg:
            problems.append(f"{name}: {msg}")
    return problems


# --------------------------------------------------------------------------
# serialization


def _scan_blob(scan: ScanRecord) -> bytes:
    return np.ascontiguousarray(scan.features, dtype=FEATURE_DTYPE).tobytes()


def dataset_manifest(ds: Dataset) -> dict[str, Any]:
    scans = []
    for sid in sorted(ds.scans):
        s = ds.scans[sid]
        blob = _scan_blob(s)
        scans.append(
            {
                "scan_id": s.scan_id,
                "patient_id": s.patient_id,
                "scanner_id": s.scanner_id,
                "site_id": s.site_id,
                "n_tiles": s.n_tiles,
                "coords": np.asarray(s.coords, dtype=np.int64).tolist(),
                "blob": f"{s.scan_id}.f32",
                "blob_bytes": len(blob),
                "blob_sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    patients = [
        {
            "patient_id": p.patient_id,
            "class_label": p.class_label,
            "survival_time": p.survival_time,
            "event": p.event,
            "stratum": p.stratum,
            "scans": list(p.scans),
        }
        for p in ds.patients
    ]
    pairs = [
        {
            "scan_a": pr.scan_a.scan_id,
            "scan_b": pr.scan_b.scan_id,
            "correspondence": np.asarray(pr.correspondence, dtype=np.int64).tolist(),
        }
        for pr in ds.pairs
    ]
    return {
        "format_version": FORMAT_VERSION,
        "feature_dim": ds.feature_dim,
        "patients": patients,
        "scans": scans,
        "pairs": pairs,
        "metadata": ds.metadata,
    }


def dataset_digest(ds: Dataset) -> str:
    """sha256 over the canonical manifest (which embeds per-blob hashes)."""
    return hashlib.sha256(canonical_json(dataset_manifest(ds))).hexdigest()


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def save_dataset(ds: Dataset, path: str | Path, overwrite: bool = False) -> Path:
    path = Path(path)
    if (path / MANIFEST).exists() and not overwrite:
        raise ConfigError(f"dataset already exists at {path} (pass overwrite to replace it)")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create dataset directory {path}: {exc}") from exc
    manifest = dataset_manifest(ds)
    for sid in sorted(ds.scans):
        (path / f"{sid}.f32").write_bytes(_scan_blob(ds.scans[sid]))
    (path / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise DataError(f"no dataset manifest at {mpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{mpath}: malformed JSON ({exc})") from exc
    D = int(m["feature_dim"])
    scans: dict[str, ScanRecord] = {}
    for entry in m["scans"]:
        bpath = path / entry["blob"]
        if not bpath.exists():
            raise DataError(f"missing feature blob {bpath}")
        raw = bpath.read_bytes()
        if len(raw) != entry["blob_bytes"]:
            raise IntegrityError(f"{bpath}: expected {entry['blob_bytes']} bytes, found {len(raw)}")
        if "blob_sha256" in entry and hashlib.sha256(raw).hexdigest() != entry["blob_sha256"]:
            raise IntegrityError(f"{bpath}: checksum mismatch")
        n = int(entry["n_tiles"])
        if len(raw) != n * D * FEATURE_DTYPE.itemsize:
            raise IntegrityError(f"{bpath}: byte length inconsistent with {n} tiles x {D}")
        feats = np.frombuffer(raw, dtype=FEATURE_DTYPE).reshape(n, D).astype(np.float32)
        feats.setflags(write=False)
        coords = np.asarray(entry["coords"], dtype=np.int64).reshape(n, 2)
        scans[entry["scan_id"]] = ScanRecord(
            entry["scan_id"], entry["patient_id"], entry["scanner_id"], entry["site_id"], feats, coords
        )
    patients = [
        PatientRecord(
            patient_id=p["patient_id"],
            class_label=p["class_label"],
            scans=tuple(p["scans"]),
            survival_time=p.get("survival_time"),
            event=p.get("event"),
            stratum=p.get("stratum"),
        )
        for p in m["patients"]
    ]
    pairs = []
    for pr in m["pairs"]:
        for key in ("scan_a", "scan_b"):
            if pr[key] not in scans:
                raise DataError(f"pair references missing scan {pr[key]}")
        corr = np.asarray(pr["correspondence"], dtype=np.int64).reshape(-1, 2)
        pairs.append(ScanPair(scans[pr["scan_a"]], scans[pr["scan_b"]], corr))
    return Dataset(patients, scans, pairs, D, m.get("metadata", {}))
