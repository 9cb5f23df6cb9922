"""Edge-based mesh convolution with learned edge-collapse pooling.

Edges carry five geometric input features; convolution mixes an edge
with symmetric functions (sum, absolute difference) of its four
cross-face neighbors, which makes the output invariant to swapping the
two incident faces. Pooling collapses the edges with the weakest
feature norms while preserving manifoldness, merging features by
averaging; gradients flow through the feature pathway only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..decimate import MeshConnectivity
from ..errors import DecimationError, DimensionError, MeshValidationError, NonManifoldMeshError
from ..layers import GroupNorm, Linear, Module, ModuleList
from ..mesh import SurfaceMesh
from ..tensor import Parameter, Tensor, concat, gather_rows, no_grad, set_pool, sparse_matmul

__all__ = [
    "EdgeMesh",
    "build_edge_mesh",
    "compute_edge_features",
    "MeshConv",
    "mesh_conv_forward",
    "mesh_pool_edge_collapse",
    "MeshCnnConfig",
    "MeshCnnModel",
    "meshcnn_model_forward",
]


@dataclass
class EdgeMesh:
    """Edge-centric view of a triangle mesh.

    ``edges[i]`` is the canonical (low, high) vertex pair of edge i;
    edges are ordered lexicographically. ``neighbors[i]`` holds the
    four neighbor edge ids (two from each incident face, the face with
    the smaller index first, counter-clockwise from the edge within
    each face); -1 marks the absent pair of a boundary edge.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray       # (E, 2)
    neighbors: np.ndarray   # (E, 4)

    @property
    def edge_count(self) -> int:
        return len(self.edges)


def _directed_neighbors(face, u, v, edge_ids):
    """The two edges following directed edge (u, v) counter-clockwise
    within ``face``, as edge ids."""
    a, b, c = face
    if (a, b) == (u, v):
        w = c
    elif (b, c) == (u, v):
        w = a
    else:
        w = b
    first = edge_ids[(v, w) if v < w else (w, v)]
    second = edge_ids[(w, u) if w < u else (u, w)]
    return first, second


def build_edge_mesh(mesh: SurfaceMesh) -> EdgeMesh:
    """Enumerate unique edges and assemble each edge's 4-neighborhood."""
    mesh.validate()
    edges = mesh.edges()
    edge_ids = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}
    edge_faces: dict[int, list[int]] = {i: [] for i in range(len(edges))}
    for fid, (a, b, c) in enumerate(mesh.faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(u), int(v)) if u < v else (int(v), int(u))
            edge_faces[edge_ids[key]].append(fid)

    neighbors = np.full((len(edges), 4), -1, dtype=np.int64)
    for eid, fids in edge_faces.items():
        if len(fids) > 2:
            raise NonManifoldMeshError(f"edge {tuple(edges[eid])} borders {len(fids)} faces")
        u, v = (int(x) for x in edges[eid])
        for slot, fid in enumerate(sorted(fids)):
            face = tuple(int(x) for x in mesh.faces[fid])
            # the face traverses the edge as (u,v) or (v,u); follow its winding
            if (u, v) in ((face[0], face[1]), (face[1], face[2]), (face[2], face[0])):
                pair = _directed_neighbors(face, u, v, edge_ids)
            else:
                pair = _directed_neighbors(face, v, u, edge_ids)
            neighbors[eid, 2 * slot : 2 * slot + 2] = pair
    return EdgeMesh(mesh.vertices.copy(), mesh.faces.copy(), edges, neighbors)


def compute_edge_features(edge_mesh: EdgeMesh) -> np.ndarray:
    """Five geometric features per edge.

    Layout: [dihedral angle (rad, flat = pi), the two inner angles
    opposite the edge (sorted ascending), the two opposite-vertex
    height to edge length ratios (sorted ascending)]. Boundary edges
    duplicate their single face's values. All five are invariant to
    rigid motions.
    """
    verts = edge_mesh.vertices
    faces = edge_mesh.faces
    edges = edge_mesh.edges
    edge_ids = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}

    normals = np.zeros((len(edges), 2, 3))
    angles = np.zeros((len(edges), 2))
    ratios = np.zeros((len(edges), 2))
    seen = np.zeros(len(edges), dtype=np.int64)

    for face in faces:
        a, b, c = (int(x) for x in face)
        pts = verts[[a, b, c]]
        cross = np.cross(pts[1] - pts[0], pts[2] - pts[0])
        area2 = float(np.linalg.norm(cross))  # twice the face area
        if area2 <= 0.0:
            raise MeshValidationError(f"zero-area face {tuple(face)}")
        normal = cross / area2
        for u, v, w in ((a, b, c), (b, c, a), (c, a, b)):
            key = (u, v) if u < v else (v, u)
            eid = edge_ids[key]
            slot = seen[eid]
            edge_vec = verts[v] - verts[u]
            length = float(np.linalg.norm(edge_vec))
            if length <= 0.0:
                raise MeshValidationError(f"zero-length edge {key}")
            p, q = verts[u] - verts[w], verts[v] - verts[w]
            cos = float(p @ q) / max(
                float(np.linalg.norm(p)) * float(np.linalg.norm(q)), 1e-300
            )
            normals[eid, slot] = normal
            angles[eid, slot] = np.arccos(np.clip(cos, -1.0, 1.0))
            ratios[eid, slot] = area2 / (length * length)  # height over edge length
            seen[eid] += 1

    boundary = seen == 1
    normals[boundary, 1] = normals[boundary, 0]
    angles[boundary, 1] = angles[boundary, 0]
    ratios[boundary, 1] = ratios[boundary, 0]

    cos_n = np.clip(np.einsum("ij,ij->i", normals[:, 0], normals[:, 1]), -1.0, 1.0)
    dihedral = np.pi - np.arccos(cos_n)
    features = np.empty((len(edges), 5))
    features[:, 0] = dihedral
    features[:, 1:3] = np.sort(angles, axis=1)
    features[:, 3:5] = np.sort(ratios, axis=1)
    return features


class MeshConv(Module):
    """Learned combination of an edge with the symmetric functions of
    its four neighbors: k0 e + k1 |a-c| + k2 (a+c) + k3 |b-d| + k4 (b+d)."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.k0 = Parameter(np.zeros((in_features, out_features)))
        self.k1 = Parameter(np.zeros((in_features, out_features)))
        self.k2 = Parameter(np.zeros((in_features, out_features)))
        self.k3 = Parameter(np.zeros((in_features, out_features)))
        self.k4 = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, features: Tensor, edge_mesh: EdgeMesh) -> Tensor:
        return mesh_conv_forward(features, edge_mesh, self)

    __call__ = forward


def mesh_conv_forward(features: Tensor, edge_mesh: EdgeMesh, kernel: MeshConv) -> Tensor:
    """Convolve edge features with their 4-neighborhoods; absent
    boundary neighbors contribute zero features."""
    e_count, width = features.shape
    if width != kernel.in_features:
        raise DimensionError(
            f"features have width {width}, kernel expects {kernel.in_features}"
        )
    if e_count != edge_mesh.edge_count:
        raise DimensionError(
            f"{e_count} feature rows for {edge_mesh.edge_count} edges"
        )
    padded = concat([features, Tensor(np.zeros((1, width)))], axis=0)
    idx = np.where(edge_mesh.neighbors >= 0, edge_mesh.neighbors, e_count)
    ea = gather_rows(padded, idx[:, 0])
    eb = gather_rows(padded, idx[:, 1])
    ec = gather_rows(padded, idx[:, 2])
    ed = gather_rows(padded, idx[:, 3])
    return (
        features @ kernel.k0
        + (ea - ec).abs() @ kernel.k1
        + (ea + ec) @ kernel.k2
        + (eb - ed).abs() @ kernel.k3
        + (eb + ed) @ kernel.k4
        + kernel.bias
    )


# -- pooling ---------------------------------------------------------------


def mesh_pool_edge_collapse(
    features: Tensor, edge_mesh: EdgeMesh, target_edges: int
) -> tuple[Tensor, EdgeMesh]:
    """Collapse the weakest-norm edges until at most ``target_edges``
    remain.

    Edges are processed in ascending order of input feature L2 norm
    (ties by edge index); illegal collapses are skipped. Each collapse
    removes one vertex, three edges and two faces; each surviving
    merged edge averages its merged pair with the collapsed edge. The
    collapse selection is constant for the backward pass; gradients
    flow through the averaging alone.
    """
    if target_edges >= edge_mesh.edge_count:
        return features, edge_mesh
    conn = MeshConnectivity(edge_mesh.faces, len(edge_mesh.vertices))
    if conn.edge_count != edge_mesh.edge_count:
        raise DimensionError("edge mesh and face list disagree")

    positions = edge_mesh.vertices.copy()
    # live edge -> averaging weights over the *input* edge rows
    weights: dict[tuple[int, int], dict[int, float]] = {
        (int(a), int(b)): {i: 1.0} for i, (a, b) in enumerate(edge_mesh.edges)
    }
    # original edge ids stay collapsible through renames and merges:
    # a union-find maps each id to the live edge it now belongs to
    parent = list(range(len(edge_mesh.edges)))
    dead: set[int] = set()
    root_key: dict[int, tuple[int, int]] = {
        i: (int(a), int(b)) for i, (a, b) in enumerate(edge_mesh.edges)
    }
    key_root = {key: i for i, key in root_key.items()}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def canonical(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def rekey(old: tuple[int, int], new: tuple[int, int]):
        root = key_root.pop(old)
        key_root[new] = root
        root_key[root] = new

    norms = np.linalg.norm(features.data, axis=1)
    order = np.lexsort((np.arange(len(norms)), norms))

    for orig in order:
        if conn.edge_count <= target_edges:
            break
        root = find(int(orig))
        if root in dead:
            continue
        u, v = root_key[root]
        if not conn.is_collapse_legal(u, v):
            continue
        nbrs_v = set(conn.neighbors(v))
        record = conn.collapse(u, v)
        collapsed = weights.pop((u, v))
        key_root.pop((u, v))
        dead.add(root)
        positions[u] = 0.5 * (positions[u] + positions[v])
        for w in record.opposite_vertices:
            ku, kv = canonical(u, w), canonical(v, w)
            merged: dict[int, float] = {}
            for source in (weights.pop(ku), weights.pop(kv), collapsed):
                for row, wt in source.items():
                    merged[row] = merged.get(row, 0.0) + wt / 3.0
            weights[ku] = merged
            ra, rb = key_root.pop(ku), key_root.pop(kv)
            keep, absorb = (ra, rb) if ra < rb else (rb, ra)
            parent[absorb] = keep
            key_root[ku] = keep
            root_key[keep] = ku
        for x in nbrs_v:
            if x == u or x in record.opposite_vertices:
                continue
            weights[canonical(u, x)] = weights.pop(canonical(v, x))
            rekey(canonical(v, x), canonical(u, x))
    if conn.edge_count > target_edges:
        raise DecimationError(
            f"no legal collapse left at {conn.edge_count} edges (target {target_edges})"
        )

    final_keys = sorted(weights)
    rows, cols, vals = [], [], []
    for i, key in enumerate(final_keys):
        for row, wt in weights[key].items():
            rows.append(i)
            cols.append(row)
            vals.append(wt)
    merge = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(final_keys), edge_mesh.edge_count)
    )
    pooled = sparse_matmul(merge, features)

    # drop dead vertex rows; the monotone remap keeps the lexicographic
    # edge order aligned with sorted(weights)
    keep = np.flatnonzero(conn.alive)
    remap = np.full(len(conn.alive), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    coarse = SurfaceMesh(positions[keep], remap[conn.live_faces()])
    pooled_mesh = build_edge_mesh(coarse)
    assert [tuple(remap[list(k)]) for k in final_keys] == [
        tuple(e) for e in pooled_mesh.edges
    ]
    return pooled, pooled_mesh


# -- model -------------------------------------------------------------------


@dataclass
class MeshCnnConfig:
    conv_widths: tuple[int, ...] = (16, 32, 32)
    pool_ratios: tuple[float, ...] = (0.8, 0.6)
    norm_groups: int = 2
    in_features: int = 5

    @classmethod
    def small(cls) -> "MeshCnnConfig":
        return cls(conv_widths=(16, 32, 32), pool_ratios=(0.8, 0.6))


class MeshCnnModel(Module):
    """(mesh conv, ReLU, group norm, pool) blocks, global average over
    the remaining edges, linear head."""

    def __init__(self, config: MeshCnnConfig):
        super().__init__()
        self.config = config
        self.convs = ModuleList()
        self.norms = ModuleList()
        width = config.in_features
        for out in config.conv_widths:
            self.convs.append(MeshConv(width, out))
            self.norms.append(GroupNorm(out, config.norm_groups))
            width = out
        self.head = Linear(width, 1)

    @property
    def output_bias(self):
        return self.head.bias

    def forward(self, edge_mesh: EdgeMesh, features: np.ndarray | Tensor) -> Tensor:
        """Scalar age prediction from an edge mesh and its E x 5 features."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        initial_edges = edge_mesh.edge_count
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = conv(x, edge_mesh).relu()
            # group statistics span channels and edges: (1, C, E) layout
            x = norm(x.transpose().reshape(1, norm.state.channels, -1))
            x = x.reshape(norm.state.channels, -1).transpose()
            if i < len(self.config.pool_ratios):
                target = int(round(self.config.pool_ratios[i] * initial_edges))
                x, edge_mesh = mesh_pool_edge_collapse(x, edge_mesh, target)
        pooled = set_pool(x, "mean")
        return self.head(pooled.reshape(1, -1)).reshape(())

    __call__ = forward


def meshcnn_model_forward(mesh: SurfaceMesh, model: MeshCnnModel) -> float:
    """Evaluation-mode age prediction in weeks from a surface mesh."""
    edge_mesh = build_edge_mesh(mesh)
    features = compute_edge_features(edge_mesh)
    with no_grad():
        return model(edge_mesh, features).item()
