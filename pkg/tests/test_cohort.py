import numpy as np
import pytest

from surfage.cohort import (
    CohortManifest,
    ScanRecord,
    generate_synthetic_cohort,
    stratified_group_split,
    synthetic_age,
    synthetic_bump_count,
)
from surfage.errors import ConfigurationError, SplitError
from surfage.mesh import load_mesh


def _record(subject, scan="scan-01", sex="M", birth=30.0, age=35.0):
    return ScanRecord(subject, scan, f"{subject}.off", f"{subject}.csv", sex, birth, age)


def _cohort(n, rng):
    records = []
    for i in range(n):
        records.append(
            _record(
                f"sub-{i:03d}",
                sex="M" if i % 2 == 0 else "F",
                birth=float(rng.uniform(24, 40)),
                age=float(rng.uniform(27, 45)),
            )
        )
    return CohortManifest(records)


class TestManifest:
    def test_duplicate_scan_rejected(self):
        with pytest.raises(SplitError):
            CohortManifest([_record("a"), _record("a")])

    def test_age_out_of_range_warns_not_errors(self):
        with pytest.warns(UserWarning):
            CohortManifest([_record("a", age=50.0)])

    def test_csv_roundtrip(self, tmp_path):
        manifest = _cohort(5, np.random.default_rng(0))
        path = tmp_path / "manifest.csv"
        manifest.save(path)
        again = CohortManifest.load(path)
        assert [r.subject_id for r in again.records] == [
            r.subject_id for r in manifest.records
        ]
        assert again.records[0].birth_age_weeks == manifest.records[0].birth_age_weeks


class TestStratifiedGroupSplit:
    def test_100_subjects_split_66_17_17(self):
        manifest = _cohort(100, np.random.default_rng(1))
        out = stratified_group_split(manifest, seed=3)
        counts = {
            name: len({r.subject_id for r in out.split(name)})
            for name in ("train", "val", "test")
        }
        assert abs(counts["train"] - 66) <= 1
        assert abs(counts["val"] - 17) <= 1
        assert abs(counts["test"] - 17) <= 1
        assert sum(counts.values()) == 100

    def test_multi_scan_subjects_co_assigned(self):
        rng = np.random.default_rng(2)
        records = []
        for i in range(20):
            subject = f"sub-{i:03d}"
            age = float(rng.uniform(28, 44))
            for s in range(1 + i % 3):
                records.append(
                    _record(subject, scan=f"scan-{s:02d}", birth=28.0, age=age + s)
                )
        out = stratified_group_split(CohortManifest(records), seed=0)
        by_subject = out.subjects()
        for recs in by_subject.values():
            assert len({r.split for r in recs}) == 1

    def test_no_subject_in_two_splits(self):
        out = stratified_group_split(_cohort(50, np.random.default_rng(3)), seed=1)
        seen = {}
        for r in out.records:
            assert seen.setdefault(r.subject_id, r.split) == r.split

    def test_same_seed_identical(self):
        manifest = _cohort(60, np.random.default_rng(4))
        a = stratified_group_split(manifest, seed=9)
        b = stratified_group_split(manifest, seed=9)
        assert [r.split for r in a.records] == [r.split for r in b.records]

    def test_age_week_histogram_balanced(self):
        manifest = _cohort(200, np.random.default_rng(5))
        out = stratified_group_split(manifest, seed=7)
        subjects = out.subjects()
        fractions = {"train": 0.657, "val": 0.1715, "test": 0.1715}
        bins: dict[int, dict[str, int]] = {}
        for sid, recs in subjects.items():
            week = int(round(min(r.scan_age_weeks for r in recs)))
            bins.setdefault(week, {"train": 0, "val": 0, "test": 0, "all": 0})
            bins[week][recs[0].split] += 1
            bins[week]["all"] += 1
        for week, c in bins.items():
            for name, frac in fractions.items():
                assert abs(c[name] - frac * c["all"]) <= 2.0, (week, c)

    def test_too_few_subjects(self):
        with pytest.raises(SplitError):
            stratified_group_split(CohortManifest([_record("a"), _record("b")]), seed=0)

    def test_bad_fractions(self):
        with pytest.raises(SplitError):
            stratified_group_split(
                _cohort(10, np.random.default_rng(0)), fractions=(0.5, 0.2, 0.2), seed=0
            )


class TestSyntheticCohort:
    def test_age_formula_endpoints(self):
        assert synthetic_age(0.8, 0.0) == 27.0
        assert synthetic_age(1.2, 0.3) == 45.0
        assert 27.0 <= synthetic_age(1.0, 0.15) <= 45.0

    def test_bump_count_monotone_in_radius(self):
        counts = [synthetic_bump_count(r) for r in np.linspace(0.8, 1.2, 9)]
        assert counts[0] == 3 and counts[-1] == 8
        assert all(b >= a for a, b in zip(counts, counts[1:]))

    def test_count_below_three_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            generate_synthetic_cohort(2, 0, tmp_path)

    def test_determinism_byte_identical(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        generate_synthetic_cohort(4, 11, a_dir)
        generate_synthetic_cohort(4, 11, b_dir)
        for name in sorted(p.name for p in a_dir.iterdir()):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_meshes_are_valid_and_closed(self, tmp_path):
        manifest = generate_synthetic_cohort(3, 5, tmp_path)
        assert len(manifest.records) == 3
        for record in manifest.records:
            mesh = load_mesh(
                manifest.resolve(record.mesh_path),
                manifest.resolve(record.feature_path),
            )
            assert mesh.vertex_count == 2562
            assert mesh.is_closed()
            assert set(mesh.channels) == {"ct", "sd", "curv", "mm"}
            assert 27.0 <= record.scan_age_weeks <= 45.0

    def test_sex_alternates(self, tmp_path):
        manifest = generate_synthetic_cohort(4, 2, tmp_path)
        assert [r.sex for r in manifest.records] == ["M", "F", "M", "F"]

    def test_curvature_tracks_reciprocal_radius(self, tmp_path):
        manifest = generate_synthetic_cohort(8, 3, tmp_path)
        by_radius = []
        for record in manifest.records:
            mesh = load_mesh(
                manifest.resolve(record.mesh_path),
                manifest.resolve(record.feature_path),
            )
            radius = np.linalg.norm(mesh.vertices, axis=1).mean()
            by_radius.append((radius, np.median(mesh.channels["curv"])))
        by_radius.sort()
        radii = np.array([r for r, _ in by_radius])
        curvs = np.array([c for _, c in by_radius])
        corr = np.corrcoef(1.0 / radii, curvs)[0, 1]
        assert corr > 0.8
