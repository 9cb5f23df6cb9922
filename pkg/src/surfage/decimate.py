"""Edge-collapse surgery and quadric-error-metric mesh decimation.

``MeshConnectivity`` performs the topological part of a collapse (with
the link-condition legality test) and is shared with the learned
edge-collapse pooling in the mesh model; every legal collapse on a
closed manifold removes exactly one vertex, three edges and two faces.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import DecimationError
from .geometry import face_normals_and_areas, vertex_areas
from .mesh import SurfaceMesh

__all__ = ["MeshConnectivity", "CollapseRecord", "decimate_mesh"]


@dataclass
class CollapseRecord:
    """What one collapse of edge (kept, removed) did to the mesh."""

    kept: int
    removed: int
    removed_faces: list[int]
    opposite_vertices: list[int]  # third vertex of each removed face
    relabeled_faces: list[int]    # faces where `removed` became `kept`


class MeshConnectivity:
    """Mutable vertex/face adjacency supporting legal edge collapses."""

    def __init__(self, faces: np.ndarray, n_vertices: int):
        self.faces: dict[int, tuple[int, int, int]] = {
            i: tuple(int(v) for v in f) for i, f in enumerate(faces)
        }
        self.vert_faces: list[set[int]] = [set() for _ in range(n_vertices)]
        self.vert_verts: list[set[int]] = [set() for _ in range(n_vertices)]
        for fid, (a, b, c) in self.faces.items():
            for v in (a, b, c):
                self.vert_faces[v].add(fid)
            self.vert_verts[a].update((b, c))
            self.vert_verts[b].update((a, c))
            self.vert_verts[c].update((a, b))
        self.alive = np.ones(n_vertices, dtype=bool)
        self.vertex_count = n_vertices
        self.edge_count = len(
            {tuple(sorted(p)) for f in self.faces.values() for p in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
        )

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def neighbors(self, v: int) -> set[int]:
        return self.vert_verts[v]

    def edge_exists(self, u: int, v: int) -> bool:
        return (
            bool(self.alive[u])
            and bool(self.alive[v])
            and v in self.vert_verts[u]
        )

    def shared_faces(self, u: int, v: int) -> list[int]:
        return sorted(self.vert_faces[u] & self.vert_faces[v])

    def is_collapse_legal(self, u: int, v: int) -> bool:
        """Link condition for a closed manifold: the endpoint
        neighborhoods intersect in exactly the two opposite vertices."""
        if not self.edge_exists(u, v) or self.vertex_count <= 4:
            return False
        if len(self.shared_faces(u, v)) != 2:
            return False
        return len(self.vert_verts[u] & self.vert_verts[v]) == 2

    def collapse(self, u: int, v: int) -> CollapseRecord:
        """Merge vertex ``v`` into ``u``; caller must have checked legality."""
        removed_faces = self.shared_faces(u, v)
        opposite = [
            next(w for w in self.faces[fid] if w not in (u, v))
            for fid in removed_faces
        ]
        for fid in removed_faces:
            for w in self.faces.pop(fid):
                self.vert_faces[w].discard(fid)
        relabeled = []
        for fid in sorted(self.vert_faces[v]):
            face = self.faces[fid]
            self.faces[fid] = tuple(u if w == v else w for w in face)
            self.vert_faces[u].add(fid)
            relabeled.append(fid)
        self.vert_faces[v].clear()
        for w in self.vert_verts[v]:
            self.vert_verts[w].discard(v)
            if w != u:
                self.vert_verts[w].add(u)
                self.vert_verts[u].add(w)
        self.vert_verts[u].discard(u)
        self.vert_verts[v] = set()
        self.alive[v] = False
        self.vertex_count -= 1
        self.edge_count -= 3
        return CollapseRecord(u, v, removed_faces, opposite, relabeled)

    def live_faces(self) -> np.ndarray:
        return np.array([self.faces[k] for k in sorted(self.faces)], dtype=np.int64)


# -- quadric decimation --------------------------------------------------------


def _vertex_quadrics(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Sum of area-weighted plane quadrics of the incident faces."""
    normals, areas = face_normals_and_areas(vertices, faces)
    d = -np.einsum("ij,ij->i", normals, vertices[faces[:, 0]])
    planes = np.concatenate([normals, d[:, None]], axis=1)
    face_q = areas[:, None, None] * np.einsum("fi,fj->fij", planes, planes)
    quadrics = np.zeros((len(vertices), 4, 4))
    for column in range(3):
        np.add.at(quadrics, faces[:, column], face_q)
    return quadrics


def _quadric_cost(qf: list, x: float, y: float, z: float) -> float:
    """Evaluate the homogeneous quadratic form; ``qf`` is the flattened
    symmetric 4x4 quadric. Scalar arithmetic: this sits in the hot loop."""
    return (
        qf[0] * x * x + qf[5] * y * y + qf[10] * z * z + qf[15]
        + 2.0 * (
            qf[1] * x * y + qf[2] * x * z + qf[3] * x
            + qf[6] * y * z + qf[7] * y + qf[11] * z
        )
    )


def _would_flip(conn, positions, moved: int, other: int, candidate, removed) -> bool:
    """True if moving ``moved`` (or relabeling ``other``) to ``candidate``
    reverses the orientation of any surviving incident face."""
    cx, cy, cz = candidate
    pair = (moved, other)
    for vid in pair:
        for fid in conn.vert_faces[vid]:
            if fid in removed:
                continue
            tri = conn.faces[fid]
            ax, ay, az = positions[tri[0]]
            bx, by, bz = positions[tri[1]]
            gx, gy, gz = positions[tri[2]]
            u1, u2, u3 = bx - ax, by - ay, bz - az
            v1, v2, v3 = gx - ax, gy - ay, gz - az
            ox = u2 * v3 - u3 * v2
            oy = u3 * v1 - u1 * v3
            oz = u1 * v2 - u2 * v1
            if tri[0] in pair:
                ax, ay, az = cx, cy, cz
            if tri[1] in pair:
                bx, by, bz = cx, cy, cz
            if tri[2] in pair:
                gx, gy, gz = cx, cy, cz
            u1, u2, u3 = bx - ax, by - ay, bz - az
            v1, v2, v3 = gx - ax, gy - ay, gz - az
            nx = u2 * v3 - u3 * v2
            ny = u3 * v1 - u1 * v3
            nz = u1 * v2 - u2 * v1
            if ox * nx + oy * ny + oz * nz <= 1e-12 * (ox * ox + oy * oy + oz * oz):
                return True
    return False


def decimate_mesh(mesh: SurfaceMesh, target_vertices: int) -> SurfaceMesh:
    """Shrink a closed manifold mesh to at most ``target_vertices``
    vertices by collapsing the cheapest edges under the quadric error
    metric. Channels collapse by area-weighted averaging of the merged
    vertex pair; the Euler characteristic is preserved.
    """
    if target_vertices < 4:
        raise DecimationError(f"decimation target must be at least 4, got {target_vertices}")
    mesh.validate()
    if mesh.vertex_count <= target_vertices:
        return mesh.copy()
    if not mesh.is_closed():
        raise DecimationError("decimation requires a closed manifold mesh")

    positions = mesh.vertices.copy()
    channels = {k: v.copy() for k, v in mesh.channels.items()}
    areas = vertex_areas(positions, mesh.faces)
    quadrics = _vertex_quadrics(positions, mesh.faces)
    conn = MeshConnectivity(mesh.faces, mesh.vertex_count)
    versions = np.zeros(mesh.vertex_count, dtype=np.int64)

    def candidates(u: int, v: int):
        pu, pv = positions[u], positions[v]
        qf = (quadrics[u] + quadrics[v]).ravel().tolist()
        options = (tuple(pu), tuple(pv), tuple(0.5 * (pu + pv)))
        return sorted(
            (_quadric_cost(qf, *p), i, p) for i, p in enumerate(options)
        )

    def push(heap, u, v):
        a, b = (u, v) if u < v else (v, u)
        cost = candidates(a, b)[0][0]
        heapq.heappush(heap, (cost, a, b, int(versions[a]), int(versions[b])))

    heap: list = []
    for a, b in mesh.edges():
        push(heap, int(a), int(b))

    progressed = True
    blocked: list[tuple[int, int]] = []
    while conn.vertex_count > target_vertices:
        if not heap:
            if not blocked or not progressed:
                raise DecimationError(
                    f"no legal collapse left at {conn.vertex_count} vertices "
                    f"(target {target_vertices})"
                )
            for u, v in blocked:
                if conn.edge_exists(u, v):
                    push(heap, u, v)
            blocked.clear()
            progressed = False
            continue
        _, u, v, vu, vv = heapq.heappop(heap)
        if versions[u] != vu or versions[v] != vv or not conn.edge_exists(u, v):
            continue
        if not conn.is_collapse_legal(u, v):
            blocked.append((u, v))
            continue
        removed = set(conn.shared_faces(u, v))
        placement = None
        for _, _, p in candidates(u, v):
            if not _would_flip(conn, positions, u, v, p, removed):
                placement = p
                break
        if placement is None:
            blocked.append((u, v))
            continue

        conn.collapse(u, v)
        progressed = True
        total = areas[u] + areas[v]
        if total > 0.0:
            for name in channels:
                channels[name][u] = (
                    areas[u] * channels[name][u] + areas[v] * channels[name][v]
                ) / total
        areas[u] = total
        positions[u] = placement
        quadrics[u] = quadrics[u] + quadrics[v]
        versions[u] += 1
        versions[v] += 1
        for w in conn.neighbors(u):
            push(heap, u, int(w))

    keep = np.flatnonzero(conn.alive)
    remap = np.full(mesh.vertex_count, -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    out = SurfaceMesh(
        positions[keep],
        remap[conn.live_faces()],
        {k: v[keep] for k, v in channels.items()},
        dict(mesh.metadata),
    )
    return out.validate()
