"""Triangle-mesh geometry helpers: icospheres, face quantities, curvature."""

from __future__ import annotations

import numpy as np

__all__ = [
    "icosphere",
    "face_normals_and_areas",
    "vertex_areas",
    "angle_deficit_curvature",
    "unique_edges",
]


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere: 12 vertices at level 0, 4x faces per level.

    Returns (vertices (n,3), faces (m,3)) with counter-clockwise faces
    whose normals point outward. Level 4 has 2562 vertices.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]

    verts = list(verts)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def midpoint_index(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                p = verts[a] + verts[b]
                p /= np.linalg.norm(p)
                verts.append(p)
                idx = len(verts) - 1
                midpoint[key] = idx
            return idx

        next_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            next_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = next_faces

    vertices = np.asarray(verts)
    faces = np.asarray(faces, dtype=np.int64)
    # enforce outward orientation (centroid at origin for a sphere)
    v0, v1, v2 = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    centers = (v0 + v1 + v2) / 3.0
    flipped = np.einsum("ij,ij->i", normals, centers) < 0.0
    faces[flipped] = faces[flipped][:, ::-1]
    return vertices, faces


def face_normals_and_areas(
    vertices: np.ndarray, faces: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals (m,3) and areas (m,) of counter-clockwise faces."""
    v0 = vertices[faces[:, 0]]
    cross = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    lengths = np.linalg.norm(cross, axis=1)
    areas = 0.5 * lengths
    safe = np.where(lengths > 0.0, lengths, 1.0)
    return cross / safe[:, None], areas


def vertex_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Barycentric vertex areas: one third of each incident face area."""
    _, areas = face_normals_and_areas(vertices, faces)
    out = np.zeros(len(vertices))
    share = areas / 3.0
    for column in range(3):
        np.add.at(out, faces[:, column], share)
    return out


def angle_deficit_curvature(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Discrete Gaussian curvature: (2*pi - sum of incident angles) / area.

    Positive on convex regions; approximately 1/r^2 on a sphere of
    radius r, so its square root tracks the reciprocal radius.
    """
    deficits = np.full(len(vertices), 2.0 * np.pi)
    for corner in range(3):
        i = faces[:, corner]
        j = faces[:, (corner + 1) % 3]
        k = faces[:, (corner + 2) % 3]
        u = vertices[j] - vertices[i]
        v = vertices[k] - vertices[i]
        cos = np.einsum("ij,ij->i", u, v)
        cos /= np.maximum(np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1), 1e-300)
        angles = np.arccos(np.clip(cos, -1.0, 1.0))
        np.add.at(deficits, i, -angles)
    areas = np.maximum(vertex_areas(vertices, faces), 1e-300)
    return deficits / areas


def unique_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E,2) with i < j, sorted lexicographically."""
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)
