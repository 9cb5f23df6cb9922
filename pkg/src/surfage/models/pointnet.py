"""Hierarchical point-set abstraction regression model.

Three sample/group/encode levels followed by one global pointwise
network with max pooling and a fully connected head. Farthest-point
sampling starts from the lexicographically smallest point so the whole
forward pass is invariant to input point permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from ..layers import BatchNorm, Linear, Module, ModuleList
from ..represent import PointCloudSample
from ..tensor import Tensor, concat, gather_rows, no_grad, segment_max, set_pool, stack

__all__ = [
    "farthest_point_sampling",
    "ball_query_group",
    "PointGroups",
    "SetAbstractionConfig",
    "PointNetConfig",
    "PointNetModel",
    "set_abstraction_forward",
    "pointnet_model_forward",
]


def farthest_point_sampling(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy max-min selection of ``k`` point indices.

    The first index is the lexicographically smallest point (ties by
    index); each following index maximizes the distance to the chosen
    set, distance ties broken by the smallest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise DimensionError(f"cannot sample {k} of {n} points")
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = order[0]
    dist2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist2))  # argmax takes the first, smallest index
        chosen[i] = nxt
        dist2 = np.minimum(dist2, np.sum((points - points[nxt]) ** 2, axis=1))
    return chosen


@dataclass
class PointGroups:
    """Flattened ball-query result: rows of all groups, concatenated.

    Group ``i`` covers rows ``offsets[i]:offsets[i+1]`` of
    ``member_indices`` (indices into the query point set) and
    ``relative_positions`` (member minus centroid).
    """

    centroid_indices: np.ndarray
    member_indices: np.ndarray
    offsets: np.ndarray
    relative_positions: np.ndarray

    def members(self, i: int) -> np.ndarray:
        return self.member_indices[self.offsets[i] : self.offsets[i + 1]]


def ball_query_group(
    points: np.ndarray,
    centroids: np.ndarray,
    radius: float,
    max_group: int,
) -> PointGroups:
    """Collect up to ``max_group`` points within ``radius`` of each
    centroid, nearest first (ties by index); an empty ball falls back
    to the centroid alone."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.intp)
    diff = points[None, :, :] - points[centroids][:, None, :]
    dist2 = np.einsum("knj,knj->kn", diff, diff)
    r2 = float(radius) ** 2

    all_members: list[np.ndarray] = []
    offsets = np.zeros(len(centroids) + 1, dtype=np.intp)
    for i, c in enumerate(centroids):
        inside = np.flatnonzero(dist2[i] <= r2)
        if len(inside) == 0:
            members = np.array([c], dtype=np.intp)
        else:
            ranked = inside[np.lexsort((inside, dist2[i][inside]))]
            members = ranked[:max_group]
        all_members.append(members)
        offsets[i + 1] = offsets[i] + len(members)
    member_indices = np.concatenate(all_members)
    relative = points[member_indices] - np.repeat(
        points[centroids], np.diff(offsets), axis=0
    )
    return PointGroups(centroids, member_indices, offsets, relative)


class PointwiseMlp(Module):
    """Shared per-point encoder: (linear, batch norm, ReLU) per width."""

    def __init__(self, in_features: int, widths):
        super().__init__()
        self.linears = ModuleList()
        self.norms = ModuleList()
        prev = in_features
        for w in widths:
            self.linears.append(Linear(prev, w))
            self.norms.append(BatchNorm(w))
            prev = w
        self.out_features = prev

    def forward(self, x: Tensor) -> Tensor:
        for lin, norm in zip(self.linears, self.norms):
            x = norm(lin(x)).relu()
        return x

    __call__ = forward


@dataclass
class SetAbstractionConfig:
    centroid_count: int
    ball_radius: float
    max_group_size: int
    mlp_widths: tuple[int, ...]


class SetAbstraction(Module):
    """One sample/group/encode level: shared pointwise network within
    each ball, pooled by columnwise max."""

    def __init__(self, config: SetAbstractionConfig, in_features: int):
        super().__init__()
        self.config = config
        self.mlp = PointwiseMlp(3 + in_features, config.mlp_widths)
        self.out_features = self.mlp.out_features

    def forward(
        self, positions: np.ndarray, features: Tensor | None
    ) -> tuple[np.ndarray, Tensor]:
        cfg = self.config
        centroids = farthest_point_sampling(positions, cfg.centroid_count)
        groups = ball_query_group(
            positions, centroids, cfg.ball_radius, cfg.max_group_size
        )
        rel = Tensor(groups.relative_positions)
        if features is None:
            rows = rel
        else:
            rows = concat([rel, gather_rows(features, groups.member_indices)], axis=1)
        encoded = self.mlp(rows)
        pooled = segment_max(encoded, groups.offsets)
        return positions[centroids], pooled

    __call__ = forward


def set_abstraction_forward(
    groups: PointGroups, features: Tensor | None, mlp: PointwiseMlp
) -> Tensor:
    """Apply a shared pointwise network within each group and pool by
    columnwise max, in centroid order."""
    rel = Tensor(groups.relative_positions)
    if features is None:
        rows = rel
    else:
        rows = concat([rel, gather_rows(features, groups.member_indices)], axis=1)
    return segment_max(mlp(rows), groups.offsets)


@dataclass
class PointNetConfig:
    in_features: int
    levels: tuple[SetAbstractionConfig, ...] = (
        SetAbstractionConfig(512, 0.2, 32, (64, 64, 128)),
        SetAbstractionConfig(128, 0.4, 64, (128, 128, 256)),
        SetAbstractionConfig(32, 0.8, 64, (128, 128, 256)),
    )
    global_widths: tuple[int, ...] = (256, 512, 1024)
    head_widths: tuple[int, ...] = (512, 256)

    @classmethod
    def small(cls, in_features: int) -> "PointNetConfig":
        return cls(
            in_features,
            levels=(
                SetAbstractionConfig(96, 0.3, 32, (16, 32)),
                SetAbstractionConfig(32, 0.6, 32, (32, 64)),
                SetAbstractionConfig(12, 1.0, 16, (64, 64)),
            ),
            global_widths=(64, 128),
            head_widths=(64, 32),
        )


class PointNetModel(Module):
    """Three set-abstraction levels, a global pointwise network with
    max pooling, and a fully connected head ending in one scalar."""

    def __init__(self, config: PointNetConfig):
        super().__init__()
        self.config = config
        self.levels = ModuleList()
        width = config.in_features
        for level in config.levels:
            sa = SetAbstraction(level, width)
            self.levels.append(sa)
            width = sa.out_features
        self.global_mlp = PointwiseMlp(3 + width, config.global_widths)
        self.head_linears = ModuleList()
        self.head_norms = ModuleList()
        prev = self.global_mlp.out_features
        for w in config.head_widths:
            self.head_linears.append(Linear(prev, w))
            self.head_norms.append(BatchNorm(w))
            prev = w
        self.head_out = Linear(prev, 1)

    @property
    def output_bias(self):
        return self.head_out.bias

    def encode(self, sample: PointCloudSample) -> Tensor:
        """Per-sample encoding to the pooled global feature vector."""
        positions = np.asarray(sample.positions, dtype=np.float64)
        if len(positions) < self.config.levels[0].centroid_count:
            raise DimensionError(
                f"need at least {self.config.levels[0].centroid_count} points, "
                f"got {len(positions)}"
            )
        features = Tensor(sample.features) if sample.features.shape[1] else None
        for sa in self.levels:
            positions, features = sa(positions, features)
        rows = concat([Tensor(positions), features], axis=1)
        return set_pool(self.global_mlp(rows), "max")

    def forward_batch(self, samples) -> Tensor:
        """Predictions (batch,) for a list of point-cloud samples.

        Set-abstraction batch statistics are per sample (over points);
        head batch statistics span the batch, so training should use
        batches of at least two samples."""
        pooled = stack([self.encode(s) for s in samples])
        x = pooled
        for lin, norm in zip(self.head_linears, self.head_norms):
            x = norm(lin(x)).relu()
        return self.head_out(x).reshape(len(samples))

    def forward(self, sample: PointCloudSample) -> Tensor:
        return self.forward_batch([sample]).reshape(())

    __call__ = forward


def pointnet_model_forward(sample: PointCloudSample, model: PointNetModel) -> float:
    """Evaluation-mode age prediction in weeks for one sample."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            return model(sample).item()
    finally:
        if was_training:
            model.train()
