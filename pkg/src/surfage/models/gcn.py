"""Two-layer graph convolutional regression network.

Each layer propagates node features through the symmetrically
normalized adjacency with self-connections, applies a learned linear
map and a ReLU; a mean readout over nodes feeds a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import DimensionError
from ..layers import Linear, Module
from ..represent import SurfaceGraph
from ..tensor import Parameter, Tensor, no_grad, set_pool, sparse_matmul

__all__ = [
    "NormalizedAdjacency",
    "normalize_adjacency",
    "GcnLayer",
    "gcn_layer_forward",
    "mean_readout",
    "GcnConfig",
    "GcnModel",
    "gcn_model_forward",
]


@dataclass
class NormalizedAdjacency:
    """S = D^-1/2 (A + I) D^-1/2 held in CSR form."""

    matrix: sp.csr_matrix
    degrees: np.ndarray  # degree including the self-connection

    @property
    def node_count(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(graph: SurfaceGraph) -> NormalizedAdjacency:
    """Build the propagation operator from an undirected edge list.

    Self-connections are added here; the input must not store any. An
    isolated node keeps a unit diagonal entry.
    """
    n = graph.node_count
    edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        if (edges[:, 0] == edges[:, 1]).any():
            raise DimensionError("input adjacency must not store self-loops")
        if edges.min() < 0 or edges.max() >= n:
            raise DimensionError(f"edge index out of range for {n} nodes")
        canon = np.sort(edges, axis=1)
        if len(np.unique(canon, axis=0)) != len(canon):
            raise DimensionError("input adjacency must not store duplicate edges")
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    adj = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(n, n), dtype=np.float64
    )
    if (adj != adj.T).nnz:
        raise DimensionError("adjacency must be symmetric")
    degrees = np.asarray(adj.sum(axis=1)).reshape(-1)
    inv_sqrt = 1.0 / np.sqrt(degrees)
    scaled = sp.diags(inv_sqrt) @ adj @ sp.diags(inv_sqrt)
    return NormalizedAdjacency(scaled.tocsr(), degrees)


def gcn_layer_forward(
    adjacency: NormalizedAdjacency, x: Tensor, w: Tensor, b: Tensor | None = None
) -> Tensor:
    """ReLU(S X W + b) with sparse aggregation."""
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"feature width {x.shape[1]} does not match weight input {w.shape[0]}"
        )
    propagated = sparse_matmul(adjacency.matrix, x) @ w
    if b is not None:
        propagated = propagated + b
    return propagated.relu()


def mean_readout(x: Tensor) -> Tensor:
    """Columnwise mean over all node feature vectors."""
    return set_pool(x, "mean")


class GcnLayer(Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, adjacency: NormalizedAdjacency, x: Tensor) -> Tensor:
        return gcn_layer_forward(adjacency, x, self.weight, self.bias)

    __call__ = forward


@dataclass
class GcnConfig:
    in_features: int
    hidden: tuple[int, int] = (128, 512)

    @classmethod
    def small(cls, in_features: int) -> "GcnConfig":
        return cls(in_features, hidden=(32, 64))


class GcnModel(Module):
    def __init__(self, config: GcnConfig):
        super().__init__()
        self.config = config
        self.layer1 = GcnLayer(config.in_features, config.hidden[0])
        self.layer2 = GcnLayer(config.hidden[0], config.hidden[1])
        self.head = Linear(config.hidden[1], 1)

    @property
    def output_bias(self):
        return self.head.bias

    def forward(
        self, graph: SurfaceGraph, adjacency: NormalizedAdjacency | None = None
    ) -> Tensor:
        """Scalar age prediction for one graph; pass a precomputed
        adjacency to amortize normalization across epochs."""
        if graph.features.shape[1] != self.config.in_features:
            raise DimensionError(
                f"graph has {graph.features.shape[1]} node features, "
                f"model expects {self.config.in_features}"
            )
        if adjacency is None:
            adjacency = normalize_adjacency(graph)
        x = Tensor(graph.features)
        x = self.layer1(adjacency, x)
        x = self.layer2(adjacency, x)
        pooled = mean_readout(x)
        return self.head(pooled.reshape(1, -1)).reshape(())

    __call__ = forward


def gcn_model_forward(graph: SurfaceGraph, model: GcnModel) -> float:
    """Evaluation-mode age prediction in weeks."""
    with no_grad():
        return model(graph).item()
