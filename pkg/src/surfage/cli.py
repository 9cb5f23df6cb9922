"""Command-line interface: synth, preprocess, train, eval, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every
subcommand is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checks import GRADCHECK_GATE, run_gradient_checks
from .cohort import CohortManifest, generate_synthetic_cohort, stratified_group_split
from .decimate import decimate_mesh
from .errors import ArchitectureMismatchError, SurfageError
from .mesh import CHANNEL_NAMES, load_mesh, save_mesh, save_sidecar
from .represent import voxelize
from .training import (
    default_train_settings,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

ARCH_NAMES = ("cnn3d", "pointnet", "meshcnn", "gcn")


def _feature_list(text: str) -> tuple[str, ...]:
    if not text:
        return ()
    names = tuple(part.strip() for part in text.split(","))
    for name in names:
        if name not in CHANNEL_NAMES:
            raise argparse.ArgumentTypeError(
                f"unknown feature {name!r}; choose from {','.join(CHANNEL_NAMES)}"
            )
    return names


def _dims(text: str) -> tuple[int, int, int]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise argparse.ArgumentTypeError("dims must be three positive integers X,Y,Z")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfage",
        description="Surface age regression with geometric deep learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic cohort with splits")
    synth.add_argument("--count", type=int, required=True)
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--out", type=Path, required=True)

    prep = sub.add_parser("preprocess", help="decimate meshes and cache voxel grids")
    prep.add_argument("--manifest", type=Path, required=True)
    prep.add_argument("--decimate", type=int, default=10000)
    prep.add_argument("--out", type=Path, required=True)
    prep.add_argument("--voxel-dims", type=_dims, default=(20, 20, 20))
    prep.add_argument(
        "--voxel-extent",
        type=float,
        default=None,
        help="shared physical extent (mm) so size survives voxelization; "
        "default fits each mesh to the grid",
    )

    tr = sub.add_parser("train", help="train one architecture")
    tr.add_argument("--arch", choices=ARCH_NAMES, required=True)
    tr.add_argument("--manifest", type=Path, required=True)
    tr.add_argument("--features", type=_feature_list, default=())
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--profile", choices=("paper", "small"), default="paper")
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--log", type=Path, default=None)
    tr.add_argument("--hemisphere", default=None, help="label recorded in metadata")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--manifest", type=Path, required=True)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--arch", choices=ARCH_NAMES, default=None)
    ev.add_argument("--out", type=Path, default=None)
    ev.add_argument("--svg", type=Path, default=None)

    gc = sub.add_parser("gradcheck", help="finite-difference checks over all layers")
    gc.add_argument("--out", type=Path, default=None)
    return parser


# -- subcommands -----------------------------------------------------------------


def run_synth(args) -> int:
    manifest = generate_synthetic_cohort(args.count, args.seed, args.out)
    manifest = stratified_group_split(manifest, seed=args.seed)
    manifest.save(args.out / "manifest.csv")
    counts = {name: len({r.subject_id for r in manifest.split(name)})
              for name in ("train", "val", "test")}
    print(f"wrote {args.count} subjects to {args.out}")
    print(f"subjects per split: {counts['train']}/{counts['val']}/{counts['test']}")
    return 0


def run_preprocess(args) -> int:
    manifest = CohortManifest.load(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    kept, failures = [], []
    for record in manifest.records:
        try:
            mesh = load_mesh(
                manifest.resolve(record.mesh_path),
                manifest.resolve(record.feature_path) if record.feature_path else None,
            )
            mesh = decimate_mesh(mesh, args.decimate)
            stem = f"{record.subject_id}_{record.scan_id}"
            save_mesh(mesh, args.out / f"{stem}.off")
            save_sidecar(mesh, args.out / f"{stem}_channels.csv")
            grid = voxelize(mesh, args.voxel_dims, args.voxel_extent)
            np.save(args.out / f"{stem}_voxels.npy", grid.intensities)
            kept.append(
                dataclasses.replace(
                    record,
                    mesh_path=f"{stem}.off",
                    feature_path=f"{stem}_channels.csv",
                )
            )
        except SurfageError as exc:
            failures.append((record.subject_id, record.scan_id, str(exc)))
    CohortManifest(kept, root=args.out).save(args.out / "manifest.csv")
    meta = {
        "decimate": args.decimate,
        "voxel_dims": list(args.voxel_dims),
        "voxel_extent": args.voxel_extent,
    }
    (args.out / "preprocess.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    print(f"processed {len(kept)} scans into {args.out}")
    if failures:
        print(f"{len(failures)} scans failed:", file=sys.stderr)
        for subject, scan, message in failures:
            print(f"  {subject}/{scan}: {message}", file=sys.stderr)
        return 1
    return 0


def run_train(args) -> int:
    manifest = CohortManifest.load(args.manifest)
    settings = default_train_settings(args.arch, args.profile, args.features)
    if args.epochs is not None:
        settings.epochs = args.epochs
        if settings.schedule.kind == "cosine" and settings.profile == "small":
            settings.schedule.t_max = args.epochs
    if args.batch_size is not None:
        settings.batch_size = args.batch_size
    prep_meta = args.manifest.parent / "preprocess.json"
    if args.arch == "cnn3d" and prep_meta.exists():
        meta = json.loads(prep_meta.read_text())
        settings.voxel_dims = tuple(meta["voxel_dims"])
        settings.voxel_extent = meta["voxel_extent"]
    checkpoint, log = train(manifest, args.arch, settings, seed=args.seed)
    if args.hemisphere:
        checkpoint.metadata["hemisphere"] = args.hemisphere
    save_checkpoint(checkpoint, args.out)
    log_path = args.log if args.log else args.out.with_suffix(".log.jsonl")
    with log_path.open("w") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    print(
        f"trained {args.arch} for {settings.epochs} epochs; "
        f"best val MAE {checkpoint.metadata['best_val_mae']:.4f} weeks "
        f"(epoch {checkpoint.metadata['best_epoch']})"
    )
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return 0


def run_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    if args.arch and args.arch != checkpoint.architecture:
        raise ArchitectureMismatchError(
            f"checkpoint holds {checkpoint.architecture!r}, requested {args.arch!r}"
        )
    manifest = CohortManifest.load(args.manifest)
    report = evaluate(manifest, args.split, checkpoint)
    print(f"{'subject':12s} {'scan':10s} {'target':>8s} {'pred':>8s} {'abs err':>8s}")
    for row in report.rows:
        print(
            f"{row['subject_id']:12s} {row['scan_id']:10s} "
            f"{row['target_weeks']:8.3f} {row['prediction_weeks']:8.3f} "
            f"{row['abs_error']:8.3f}"
        )
    print(f"MAE {report.mae:.4f} ± {report.std:.4f} weeks over {len(report.rows)} scans")
    if args.out:
        with args.out.open("w") as fh:
            for row in report.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(
                json.dumps(
                    {"aggregate": {"mae": report.mae, "std": report.std,
                                   "count": len(report.rows)}},
                    sort_keys=True,
                )
                + "\n"
            )
    if args.svg:
        args.svg.write_text(_scatter_svg(report))
    return 0


def run_gradcheck(args) -> int:
    results = run_gradient_checks()
    lines = ["name\tmax_rel_error\tstatus"]
    for r in results:
        lines.append(f"{r.name}\t{r.max_rel_error:.6e}\t{'pass' if r.passed else 'FAIL'}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        args.out.write_text(text + "\n")
    worst = max(r.max_rel_error for r in results)
    print(f"# worst {worst:.3e}, gate {GRADCHECK_GATE:.0e}")
    return 0 if all(r.passed for r in results) else 1


def _scatter_svg(report, size: int = 420) -> str:
    """Prediction-versus-target scatter as a static SVG."""
    pad = 40
    targets = [r["target_weeks"] for r in report.rows]
    preds = [r["prediction_weeks"] for r in report.rows]
    lo = min(min(targets), min(preds)) - 0.5
    hi = max(max(targets), max(preds)) + 0.5

    def sx(v):
        return pad + (v - lo) / (hi - lo) * (size - 2 * pad)

    def sy(v):
        return size - pad - (v - lo) / (hi - lo) * (size - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{sx(lo)}" y1="{sy(lo)}" x2="{sx(hi)}" y2="{sy(hi)}" '
        'stroke="#999" stroke-dasharray="4"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{size - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{size - pad}" stroke="black"/>',
        f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" font-size="12">'
        "target age (weeks)</text>",
        f'<text x="12" y="{size // 2}" font-size="12" '
        f'transform="rotate(-90 12 {size // 2})" text-anchor="middle">'
        "predicted age (weeks)</text>",
    ]
    for t, p in zip(targets, preds):
        parts.append(
            f'<circle cx="{sx(t):.2f}" cy="{sy(p):.2f}" r="3" '
            'fill="#2c7fb8" fill-opacity="0.7"/>'
        )
    parts.append(
        f'<text x="{pad}" y="{pad - 10}" font-size="12">'
        f"MAE {report.mae:.3f} ± {report.std:.3f} weeks</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts)


_COMMANDS = {
    "synth": run_synth,
    "preprocess": run_preprocess,
    "train": run_train,
    "eval": run_eval,
    "gradcheck": run_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SurfageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
