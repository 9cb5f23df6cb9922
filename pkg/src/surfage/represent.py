"""Derived surface representations: point clouds, graphs, voxel grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownChannelError, VoxelizationError
from .geometry import face_normals_and_areas
from .mesh import SurfaceMesh

__all__ = [
    "PointCloudSample",
    "SurfaceGraph",
    "VoxelGrid",
    "normalize_positions",
    "to_point_cloud",
    "to_graph",
    "voxelize",
    "voxel_sample_points",
    "gaussian_smooth_downsample",
]


@dataclass
class PointCloudSample:
    """Centered, unit-radius positions (n,3) with per-point features (n,l)."""

    positions: np.ndarray
    features: np.ndarray


@dataclass
class SurfaceGraph:
    """Undirected graph over mesh vertices with node feature matrix."""

    node_count: int
    edges: np.ndarray          # (E,2) unique pairs, i < j, no self loops
    features: np.ndarray       # (N, l)


@dataclass
class VoxelGrid:
    dims: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    intensities: np.ndarray    # (X, Y, Z) in [0, 1]

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if any(d <= 0 for d in self.dims):
            raise VoxelizationError(f"grid dims must be positive, got {self.dims}")
        if not np.isfinite(self.intensities).all():
            raise VoxelizationError("voxel intensities must be finite")


def normalize_positions(vertices: np.ndarray) -> np.ndarray:
    """Center at the centroid and scale so the farthest point has radius 1."""
    centered = vertices - vertices.mean(axis=0)
    radius = np.max(np.linalg.norm(centered, axis=1))
    if radius > 0.0:
        centered = centered / radius
    return centered


def _standardized_channels(
    mesh: SurfaceMesh,
    selected_channels,
    channel_stats,
) -> np.ndarray:
    columns = []
    for name in selected_channels:
        if name not in mesh.channels:
            raise UnknownChannelError(
                f"channel {name!r} not on mesh (has {sorted(mesh.channels)})"
            )
        values = mesh.channels[name].astype(np.float64)
        if channel_stats is not None:
            mean, std = channel_stats[name]
            values = (values - mean) / (std if std > 0.0 else 1.0)
        columns.append(values)
    if not columns:
        return np.zeros((mesh.vertex_count, 0))
    return np.stack(columns, axis=1)


def to_point_cloud(
    mesh: SurfaceMesh,
    selected_channels=(),
    channel_stats: dict | None = None,
) -> PointCloudSample:
    """Vertices as a normalized point cloud; features are the selected
    channels in declared order, standardized with caller-supplied
    per-channel (mean, std) statistics (train-split statistics)."""
    return PointCloudSample(
        normalize_positions(mesh.vertices),
        _standardized_channels(mesh, selected_channels, channel_stats),
    )


def to_graph(
    mesh: SurfaceMesh,
    selected_channels=(),
    channel_stats: dict | None = None,
) -> SurfaceGraph:
    """One node per vertex, one undirected edge per unique mesh edge;
    node features are normalized coordinates followed by standardized
    channels."""
    coords = normalize_positions(mesh.vertices)
    extra = _standardized_channels(mesh, selected_channels, channel_stats)
    return SurfaceGraph(
        mesh.vertex_count,
        mesh.edges(),
        np.concatenate([coords, extra], axis=1),
    )


# -- voxelization ---------------------------------------------------------------


def voxel_sample_points(dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid-space coordinates of the 2x2x2 subsample points per axis.

    Voxel (i,j,k) spans [i,i+1)x[j,j+1)x[k,k+1); subsamples sit at the
    octant centers, offsets 0.25 and 0.75.
    """
    return tuple(
        np.repeat(np.arange(d, dtype=np.float64), 2) + np.tile([0.25, 0.75], d)
        for d in dims
    )


def _grid_transform(mesh: SurfaceMesh, dims, world_extent):
    """Uniform scale and offset mapping mesh mm coordinates into the
    grid so the surface keeps at least a one-voxel margin."""
    low = mesh.vertices.min(axis=0)
    high = mesh.vertices.max(axis=0)
    spans = high - low
    if world_extent is None:
        usable = np.array(dims, dtype=np.float64) - 2.0
        scale = float(np.min(usable / np.maximum(spans, 1e-300)))
    else:
        usable = np.array(dims, dtype=np.float64) - 2.0
        scale = float(np.min(usable / max(float(world_extent), 1e-300)))
    center = 0.5 * (low + high)
    grid_center = 0.5 * np.array(dims, dtype=np.float64)
    offset = grid_center - scale * center
    return scale, offset


def voxelize(
    mesh: SurfaceMesh,
    dims,
    world_extent: float | None = None,
) -> VoxelGrid:
    """Occupancy-fraction voxelization of a closed surface.

    Each voxel's intensity is the fraction of its 2x2x2 subsample
    points lying inside the surface (parity of +z ray crossings). With
    ``world_extent=None`` the mesh is scaled to fit the grid with a
    one-voxel margin; passing a fixed extent (in mm) instead applies
    one shared scale so that physical size survives voxelization
    across a cohort.
    """
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise VoxelizationError(f"grid dims must be positive, got {dims}")
    mesh.validate()
    if not mesh.is_closed():
        raise VoxelizationError("voxelization requires a closed (watertight) mesh")

    scale, offset = _grid_transform(mesh, dims, world_extent)
    verts = mesh.vertices * scale + offset
    tris = verts[mesh.faces]  # (m, 3, 3)

    xs, ys, zs = voxel_sample_points(dims)
    inside = _columns_inside(tris, xs, ys, zs)  # (2X, 2Y, 2Z) booleans

    # average the 8 octant bits of each voxel
    occ = inside.astype(np.float64)
    occ = occ.reshape(dims[0], 2, dims[1], 2, dims[2], 2)
    intensities = occ.mean(axis=(1, 3, 5))
    return VoxelGrid(dims, 1.0 / scale, -offset / scale, intensities)


def _columns_inside(tris: np.ndarray, xs, ys, zs) -> np.ndarray:
    """Parity ray cast along +z for every (x, y) sample column."""
    cols = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    a2, b2, c2 = tris[:, 0, :2], tris[:, 1, :2], tris[:, 2, :2]
    u, v = b2 - a2, c2 - a2
    det = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
    keep = np.abs(det) > 1e-12
    tri3 = tris[keep]
    a2, b2, c2 = a2[keep], b2[keep], c2[keep]
    normals = np.cross(tri3[:, 1] - tri3[:, 0], tri3[:, 2] - tri3[:, 0])

    n_cols = len(cols)
    crossing_lists: list[list[float]] = [[] for _ in range(n_cols)]
    chunk = max(1, int(2_000_000 // max(len(tri3), 1)))
    for start in range(0, n_cols, chunk):
        p = cols[start : start + chunk]  # (c, 2)
        # strict point-in-triangle test in the xy projection
        s0 = _edge_side(a2, b2, p)
        s1 = _edge_side(b2, c2, p)
        s2 = _edge_side(c2, a2, p)
        hit = ((s0 > 0) & (s1 > 0) & (s2 > 0)) | ((s0 < 0) & (s1 < 0) & (s2 < 0))
        ci, ti = np.nonzero(hit)
        if len(ci):
            pa = p[ci]
            n = normals[ti]
            a = tri3[ti, 0]
            z = a[:, 2] - (n[:, 0] * (pa[:, 0] - a[:, 0]) + n[:, 1] * (pa[:, 1] - a[:, 1])) / n[:, 2]
            for c, zv in zip(ci, z):
                crossing_lists[start + c].append(zv)

    max_cross = max((len(c) for c in crossing_lists), default=0)
    crossings = np.full((n_cols, max(max_cross, 1)), -np.inf)
    for i, values in enumerate(crossing_lists):
        crossings[i, : len(values)] = values
    counts = (crossings[:, None, :] > zs[None, :, None]).sum(axis=2)
    inside = (counts % 2) == 1
    return inside.reshape(len(xs), len(ys), len(zs))


def _edge_side(p0, p1, q):
    """Signed area of (p0, p1, q) for columns q (c,2) x edges (m,2)."""
    return (p1[None, :, 0] - p0[None, :, 0]) * (q[:, None, 1] - p0[None, :, 1]) - (
        p1[None, :, 1] - p0[None, :, 1]
    ) * (q[:, None, 0] - p0[None, :, 0])


# -- smoothing -------------------------------------------------------------------


def gaussian_taps(size: int = 8, sigma: float = 2.0) -> np.ndarray:
    """Discrete Gaussian taps sampled symmetrically, normalized to sum 1."""
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    taps = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


def gaussian_smooth_downsample(
    grid: VoxelGrid,
    factor: int,
    kernel_size: int = 8,
    sigma: float = 2.0,
) -> VoxelGrid:
    """Separable Gaussian smoothing followed by stride-``factor``
    subsampling; edges are padded by replication, and dims that the
    factor does not divide are replication-padded up first."""
    if factor < 1:
        raise VoxelizationError(f"downsample factor must be >= 1, got {factor}")
    taps = gaussian_taps(kernel_size, sigma)
    anchor = kernel_size // 2
    data = grid.intensities
    for axis in range(3):
        moved = np.moveaxis(data, axis, 0)
        padded = np.pad(moved, [(anchor, kernel_size - 1 - anchor)] + [(0, 0)] * 2, mode="edge")
        out = np.zeros_like(moved)
        for i, w in enumerate(taps):
            out += w * padded[i : i + moved.shape[0]]
        data = np.moveaxis(out, 0, axis)
    if factor > 1:
        pads = [(0, (-d) % factor) for d in data.shape]
        if any(p[1] for p in pads):
            data = np.pad(data, pads, mode="edge")
        data = data[::factor, ::factor, ::factor]
    return VoxelGrid(
        data.shape,
        grid.voxel_size * factor,
        grid.origin,
        data,
    )
