"""Triangle-mesh container, validation and OFF/OBJ file IO.

Per-vertex scalar channels (cortical thickness ``ct``, sulcal depth
``sd``, curvature ``curv``, myelin ``mm``) live in a CSV sidecar with
header ``vertex_index,ct,sd,curv,mm``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChannelMismatchError,
    MeshParseError,
    MeshValidationError,
    NonManifoldMeshError,
)
from .geometry import unique_edges

__all__ = [
    "CHANNEL_NAMES",
    "SurfaceMesh",
    "load_mesh",
    "save_mesh",
    "save_sidecar",
    "euler_characteristic",
]

CHANNEL_NAMES = ("ct", "sd", "curv", "mm")
SIDECAR_HEADER = ("vertex_index",) + CHANNEL_NAMES


@dataclass
class SurfaceMesh:
    """Vertices (n,3) in mm, counter-clockwise faces (m,3), named
    per-vertex scalar channels, free-form subject metadata."""

    vertices: np.ndarray
    faces: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.channels = {k: np.asarray(v, dtype=np.float64) for k, v in self.channels.items()}

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        return unique_edges(self.faces)

    def validate(self) -> "SurfaceMesh":
        """Check index bounds, face degeneracy, channel lengths and
        edge-manifoldness; raises a distinct error for each violation."""
        n = self.vertex_count
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise MeshValidationError(
                f"face index out of range: mesh has {n} vertices, "
                f"indices span [{self.faces.min()}, {self.faces.max()}]"
            )
        same = (
            (self.faces[:, 0] == self.faces[:, 1])
            | (self.faces[:, 1] == self.faces[:, 2])
            | (self.faces[:, 2] == self.faces[:, 0])
        )
        if same.any():
            raise MeshValidationError(
                f"degenerate face with repeated vertex at row {int(np.flatnonzero(same)[0])}"
            )
        for name, values in self.channels.items():
            if len(values) != n:
                raise ChannelMismatchError(
                    f"channel {name!r} has {len(values)} values for {n} vertices"
                )
        counts = _edge_face_counts(self.faces)
        if counts.size and counts.max() > 2:
            raise NonManifoldMeshError(
                f"{int((counts > 2).sum())} edges are shared by more than two faces"
            )
        return self

    def is_closed(self) -> bool:
        counts = _edge_face_counts(self.faces)
        return bool(counts.size) and bool((counts == 2).all())

    def copy(self) -> "SurfaceMesh":
        return SurfaceMesh(
            self.vertices.copy(),
            self.faces.copy(),
            {k: v.copy() for k, v in self.channels.items()},
            dict(self.metadata),
        )


def _edge_face_counts(faces: np.ndarray) -> np.ndarray:
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return counts


def euler_characteristic(mesh: SurfaceMesh) -> int:
    """V - E + F; equals 2 for a closed genus-zero surface."""
    return mesh.vertex_count - len(mesh.edges()) + mesh.face_count


# -- parsing -----------------------------------------------------------------


def load_mesh(mesh_file, feature_file=None) -> SurfaceMesh:
    """Load and validate an OFF or OBJ mesh, optionally with a channel
    sidecar whose row count must match the vertex count."""
    path = Path(mesh_file)
    if not path.exists():
        raise MeshParseError(f"mesh file not found: {path}")
    text = path.read_text()
    suffix = path.suffix.lower()
    if suffix == ".off" or text.lstrip()[:3] == "OFF":
        vertices, faces = _parse_off(text, path)
    elif suffix == ".obj":
        vertices, faces = _parse_obj(text, path)
    else:
        raise MeshParseError(f"unrecognized mesh format: {path}")
    mesh = SurfaceMesh(vertices, faces)
    if feature_file is not None:
        mesh.channels = _parse_sidecar(Path(feature_file), mesh.vertex_count)
    return mesh.validate()


def _parse_off(text: str, path: Path) -> tuple[np.ndarray, np.ndarray]:
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshParseError(f"{path}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        cursor = 4  # header counts include an edge count we ignore
        vertices = np.array(tokens[cursor : cursor + 3 * nv], dtype=np.float64)
        vertices = vertices.reshape(nv, 3)
        cursor += 3 * nv
        faces = []
        for _ in range(nf):
            arity = int(tokens[cursor])
            if arity != 3:
                raise MeshParseError(f"{path}: only triangle faces supported, got {arity}")
            faces.append([int(t) for t in tokens[cursor + 1 : cursor + 4]])
            cursor += 1 + arity
    except (ValueError, IndexError) as exc:
        raise MeshParseError(f"{path}: malformed OFF data ({exc})") from exc
    return vertices, np.array(faces, dtype=np.int64)


def _parse_obj(text: str, path: Path) -> tuple[np.ndarray, np.ndarray]:
    vertices, faces = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "v":
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshParseError(
                        f"{path}:{lineno}: only triangle faces supported"
                    )
                # vertex index is the first field of v, v/t, v//n, v/t/n
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
        except (ValueError, IndexError) as exc:
            raise MeshParseError(f"{path}:{lineno}: malformed OBJ line") from exc
    if not vertices or not faces:
        raise MeshParseError(f"{path}: no geometry found")
    return np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64)


def _parse_sidecar(path: Path, vertex_count: int) -> dict[str, np.ndarray]:
    if not path.exists():
        raise MeshParseError(f"feature sidecar not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != SIDECAR_HEADER:
            raise MeshParseError(
                f"{path}: sidecar header must be {','.join(SIDECAR_HEADER)}"
            )
        rows = [row for row in reader if row]
    if len(rows) != vertex_count:
        raise ChannelMismatchError(
            f"{path}: sidecar has {len(rows)} rows for {vertex_count} vertices"
        )
    try:
        table = np.array([[float(cell) for cell in row] for row in rows])
        order = np.argsort(table[:, 0].astype(np.int64), kind="stable")
        table = table[order]
    except ValueError as exc:
        raise MeshParseError(f"{path}: non-numeric sidecar cell") from exc
    if not np.array_equal(table[:, 0].astype(np.int64), np.arange(vertex_count)):
        raise MeshParseError(f"{path}: vertex_index column must cover 0..{vertex_count - 1}")
    return {name: table[:, i + 1].copy() for i, name in enumerate(CHANNEL_NAMES)}


# -- writing -----------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_mesh(mesh: SurfaceMesh, path) -> None:
    """Write OFF with shortest-roundtrip floats (byte-stable output)."""
    path = Path(path)
    lines = ["OFF", f"{mesh.vertex_count} {mesh.face_count} 0"]
    for v in mesh.vertices:
        lines.append(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    path.write_text("\n".join(lines) + "\n")


def save_sidecar(mesh: SurfaceMesh, path) -> None:
    """Write the channel sidecar; missing channels are stored as zeros."""
    path = Path(path)
    n = mesh.vertex_count
    columns = [
        mesh.channels.get(name, np.zeros(n)) for name in CHANNEL_NAMES
    ]
    lines = [",".join(SIDECAR_HEADER)]
    for i in range(n):
        lines.append(f"{i}," + ",".join(_fmt(col[i]) for col in columns))
    path.write_text("\n".join(lines) + "\n")
