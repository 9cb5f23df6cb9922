"""Cohort manifests, leakage-free stratified splits, synthetic surfaces.

A manifest row is one scan; subjects may own several scans and always
share one split. The synthetic generator produces bumpy icospheres
whose age target grows with radius and bump amplitude: bump count also
rises with radius so that scale-invariant representations can still
recover the size component of the target from shape alone (larger
surfaces fold more).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SplitError
from .geometry import angle_deficit_curvature, icosphere
from .mesh import SurfaceMesh, save_mesh, save_sidecar

__all__ = [
    "ScanRecord",
    "CohortManifest",
    "SPLIT_FRACTIONS",
    "stratified_group_split",
    "generate_synthetic_cohort",
]

SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.657, 0.1715, 0.1715)
MANIFEST_HEADER = (
    "subject_id",
    "scan_id",
    "mesh_path",
    "feature_path",
    "sex",
    "birth_age_weeks",
    "scan_age_weeks",
    "split",
)


@dataclass
class ScanRecord:
    subject_id: str
    scan_id: str
    mesh_path: str
    feature_path: str
    sex: str
    birth_age_weeks: float
    scan_age_weeks: float
    split: str = "unassigned"


@dataclass
class CohortManifest:
    records: list[ScanRecord] = field(default_factory=list)
    root: Path | None = None   # directory manifest paths are relative to

    def __post_init__(self):
        seen = set()
        for r in self.records:
            key = (r.subject_id, r.scan_id)
            if key in seen:
                raise SplitError(f"duplicate scan {key} in manifest")
            seen.add(key)
            if not (27.0 <= r.scan_age_weeks <= 45.0):
                warnings.warn(
                    f"scan age {r.scan_age_weeks} of {key} outside the 27-45 week range",
                    stacklevel=2,
                )
            if r.sex not in ("M", "F"):
                raise SplitError(f"sex of {key} must be M or F, got {r.sex!r}")

    def split(self, name: str) -> list[ScanRecord]:
        return [r for r in self.records if r.split == name]

    def subjects(self) -> dict[str, list[ScanRecord]]:
        out: dict[str, list[ScanRecord]] = {}
        for r in self.records:
            out.setdefault(r.subject_id, []).append(r)
        return out

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def save(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MANIFEST_HEADER)
            for r in self.records:
                row = asdict(r)
                row["birth_age_weeks"] = repr(float(r.birth_age_weeks))
                row["scan_age_weeks"] = repr(float(r.scan_age_weeks))
                writer.writerow([row[k] for k in MANIFEST_HEADER])

    @classmethod
    def load(cls, path) -> "CohortManifest":
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_HEADER:
                raise SplitError(
                    f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}"
                )
            records = [
                ScanRecord(
                    row["subject_id"],
                    row["scan_id"],
                    row["mesh_path"],
                    row["feature_path"],
                    row["sex"],
                    float(row["birth_age_weeks"]),
                    float(row["scan_age_weeks"]),
                    row["split"],
                )
                for row in reader
            ]
        return cls(records, root=path.parent)


# -- stratified, subject-grouped splitting -----------------------------------


def stratified_group_split(
    manifest: CohortManifest,
    fractions=SPLIT_FRACTIONS,
    seed: int = 0,
) -> CohortManifest:
    """Assign train/val/test per subject, stratifying on (first-scan
    age week, birth-age tercile, sex).

    All scans of a subject land in the same split. Within each stratum
    subjects are shuffled by the seed and assigned greedily to the
    split with the largest global deficit, which pins overall counts to
    the fractions within one subject.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"split fractions must sum to 1, got {fractions}")
    subjects = manifest.subjects()
    if len(subjects) < 3:
        raise SplitError(f"need at least 3 subjects to split, got {len(subjects)}")

    birth_ages = {
        sid: min(r.birth_age_weeks for r in recs) for sid, recs in subjects.items()
    }
    cuts = np.quantile(sorted(birth_ages.values()), [1 / 3, 2 / 3])

    def stratum_key(sid: str):
        recs = subjects[sid]
        first_age = min(r.scan_age_weeks for r in recs)
        tercile = int(np.searchsorted(cuts, birth_ages[sid], side="right"))
        return (int(round(first_age)), tercile, recs[0].sex)

    strata: dict[tuple, list[str]] = {}
    for sid in subjects:
        strata.setdefault(stratum_key(sid), []).append(sid)

    rng = np.random.default_rng(seed)
    counts = dict.fromkeys(SPLIT_NAMES, 0)
    assignment: dict[str, str] = {}
    total = 0
    for key in sorted(strata):
        members = sorted(strata[key])
        rng.shuffle(members)
        for sid in members:
            total += 1
            deficits = {
                name: frac * total - counts[name]
                for name, frac in zip(SPLIT_NAMES, fractions)
            }
            choice = max(SPLIT_NAMES, key=lambda n: (deficits[n], -SPLIT_NAMES.index(n)))
            counts[choice] += 1
            assignment[sid] = choice

    records = [
        ScanRecord(
            r.subject_id, r.scan_id, r.mesh_path, r.feature_path, r.sex,
            r.birth_age_weeks, r.scan_age_weeks, assignment[r.subject_id],
        )
        for r in manifest.records
    ]
    return CohortManifest(records, root=manifest.root)


# -- synthetic cohort ----------------------------------------------------------


_BASE_SPHERE: tuple[np.ndarray, np.ndarray] | None = None
BUMP_WIDTH_RAD = 0.35
AGE_SPAN = (27.0, 45.0)


def _base_sphere():
    global _BASE_SPHERE
    if _BASE_SPHERE is None:
        _BASE_SPHERE = icosphere(4)  # 2562 vertices
    return _BASE_SPHERE


def synthetic_age(radius: float, amplitude: float) -> float:
    """Target age in weeks for one synthetic subject."""
    mix = 0.5 * (radius - 0.8) / 0.4 + 0.5 * amplitude / 0.3
    lo, hi = AGE_SPAN
    return lo + (hi - lo) * min(max(mix, 0.0), 1.0)


def synthetic_bump_count(radius: float) -> int:
    """Bump count grows with radius, from 3 to 8."""
    return 3 + min(5, int(6.0 * (radius - 0.8) / 0.4))


def _build_subject(rng: np.random.Generator) -> tuple[SurfaceMesh, float, float, float]:
    directions, faces = _base_sphere()
    radius = float(rng.uniform(0.8, 1.2))
    amplitude = float(rng.uniform(0.0, 0.3))
    k = synthetic_bump_count(radius)
    centers = rng.normal(size=(k, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    angles = np.arccos(np.clip(directions @ centers.T, -1.0, 1.0))  # (n, k)
    bumps = np.exp(-(angles ** 2) / (2.0 * BUMP_WIDTH_RAD ** 2)).sum(axis=1)
    vertices = directions * (radius + amplitude * bumps)[:, None]

    curvature = np.sqrt(np.clip(angle_deficit_curvature(vertices, faces), 0.0, None))
    z = directions[:, 2]
    channels = {
        "ct": 0.5 + 2.0 * amplitude + 0.3 * amplitude * np.sin(3.0 * z),
        "sd": amplitude * bumps,
        "curv": curvature,
        "mm": 0.2 + 0.1 * z,
    }
    mesh = SurfaceMesh(vertices, faces, channels)
    birth_offset = float(rng.uniform(0.0, 8.0))
    return mesh, radius, amplitude, birth_offset


def generate_synthetic_cohort(count: int, seed: int, out_dir) -> CohortManifest:
    """Write ``count`` synthetic subjects (OFF plus channel sidecar) to
    ``out_dir`` and return their manifest with splits unassigned.

    Deterministic: the same seed produces byte-identical files.
    """
    if count < 3:
        raise ConfigurationError(f"synthetic cohort needs at least 3 subjects, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        mesh, radius, amplitude, birth_offset = _build_subject(rng)
        scan_age = synthetic_age(radius, amplitude)
        birth_age = max(23.0, min(scan_age - birth_offset, scan_age))
        subject = f"sub-{i:04d}"
        mesh_name = f"{subject}.off"
        feat_name = f"{subject}_channels.csv"
        save_mesh(mesh, out_dir / mesh_name)
        save_sidecar(mesh, out_dir / feat_name)
        records.append(
            ScanRecord(
                subject_id=subject,
                scan_id="scan-01",
                mesh_path=mesh_name,
                feature_path=feat_name,
                sex="M" if i % 2 == 0 else "F",
                birth_age_weeks=birth_age,
                scan_age_weeks=scan_age,
            )
        )
    return CohortManifest(records, root=out_dir)
