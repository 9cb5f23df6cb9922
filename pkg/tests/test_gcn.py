import numpy as np
import pytest

from surfage.errors import DimensionError, EmptySetError
from surfage.models.gcn import (
    GcnConfig,
    GcnModel,
    gcn_layer_forward,
    gcn_model_forward,
    mean_readout,
    normalize_adjacency,
)
from surfage.represent import SurfaceGraph
from surfage.tensor import Tensor
from surfage.training import init_weights

K4_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


def _graph(n, edges, features=None):
    if features is None:
        features = np.zeros((n, 1))
    return SurfaceGraph(n, np.asarray(edges).reshape(-1, 2), np.asarray(features))


def _random_graph(rng, n):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    keep = [p for p in pairs if rng.random() < 0.4]
    return _graph(n, np.array(keep).reshape(-1, 2), rng.normal(size=(n, 3)))


class TestNormalizeAdjacency:
    def test_single_isolated_node(self):
        adjacency = normalize_adjacency(_graph(1, np.zeros((0, 2))))
        assert adjacency.dense().tolist() == [[1.0]]

    def test_two_connected_nodes(self):
        adjacency = normalize_adjacency(_graph(2, [[0, 1]]))
        assert np.allclose(adjacency.dense(), [[0.5, 0.5], [0.5, 0.5]])

    def test_k4_uniform_quarter(self):
        adjacency = normalize_adjacency(_graph(4, K4_EDGES))
        assert np.allclose(adjacency.dense(), 0.25)

    def test_diagonal_is_reciprocal_degree(self):
        rng = np.random.default_rng(0)
        graph = _random_graph(rng, 12)
        adjacency = normalize_adjacency(graph)
        dense = adjacency.dense()
        assert np.allclose(np.diag(dense), 1.0 / adjacency.degrees)

    def test_symmetry_and_row_sum_bound(self):
        rng = np.random.default_rng(1)
        adjacency = normalize_adjacency(_random_graph(rng, 15))
        dense = adjacency.dense()
        assert np.array_equal(dense, dense.T)
        assert (dense.sum(axis=1) <= np.sqrt(adjacency.degrees) + 1e-12).all()

    def test_eigenvalues_in_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            adjacency = normalize_adjacency(_random_graph(rng, 10))
            eig = np.linalg.eigvalsh(adjacency.dense())
            assert eig.min() >= -1.0 - 1e-10 and eig.max() <= 1.0 + 1e-10

    def test_self_loop_rejected(self):
        with pytest.raises(DimensionError):
            normalize_adjacency(_graph(3, [[0, 0]]))

    def test_duplicate_edge_rejected(self):
        with pytest.raises(DimensionError):
            normalize_adjacency(_graph(3, [[0, 1], [1, 0]]))


class TestGcnLayer:
    def test_single_node_identity(self):
        adjacency = normalize_adjacency(_graph(1, np.zeros((0, 2))))
        out = gcn_layer_forward(adjacency, Tensor([[2.5]]), Tensor([[1.0]]))
        assert out.data.tolist() == [[2.5]]

    def test_two_node_average(self):
        adjacency = normalize_adjacency(_graph(2, [[0, 1]]))
        out = gcn_layer_forward(adjacency, Tensor([[1.0], [0.0]]), Tensor([[1.0]]))
        assert np.allclose(out.data, [[0.5], [0.5]])

    def test_width_mismatch(self):
        adjacency = normalize_adjacency(_graph(2, [[0, 1]]))
        with pytest.raises(DimensionError):
            gcn_layer_forward(adjacency, Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_sparse_equals_dense_oracle_on_random_graphs(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(2, 21))
            graph = _random_graph(rng, n)
            w = rng.normal(size=(3, 4))
            adjacency = normalize_adjacency(graph)
            sparse = gcn_layer_forward(adjacency, Tensor(graph.features), Tensor(w))
            dense = np.maximum(adjacency.dense() @ graph.features @ w, 0.0)
            assert np.abs(sparse.data - dense).max() < 1e-12


class TestMeanReadout:
    def test_example(self):
        assert mean_readout(Tensor([[1.0, 2.0], [3.0, 4.0]])).data.tolist() == [2.0, 3.0]

    def test_single_node(self):
        assert mean_readout(Tensor([[7.0, 1.0]])).data.tolist() == [7.0, 1.0]

    def test_empty_graph_rejected(self):
        with pytest.raises(EmptySetError):
            mean_readout(Tensor(np.zeros((0, 3))))


class TestGcnModel:
    def _model(self, seed=0, hidden=(6, 5)):
        model = GcnModel(GcnConfig(in_features=3, hidden=hidden))
        init_weights(model, "glorot_uniform", np.random.default_rng(seed))
        return model

    def test_zero_weights_output_head_bias(self):
        model = GcnModel(GcnConfig(in_features=3, hidden=(4, 4)))
        model.head.bias.data[:] = 41.25
        graph = _graph(4, K4_EDGES, np.random.default_rng(1).normal(size=(4, 3)))
        assert gcn_model_forward(graph, model) == pytest.approx(41.25)

    def test_node_relabeling_invariance(self):
        rng = np.random.default_rng(4)
        model = self._model(seed=5)
        graph = _random_graph(rng, 12)
        perm = rng.permutation(12)
        remap = np.empty(12, dtype=int)
        remap[perm] = np.arange(12)
        relabeled = _graph(
            12,
            np.sort(remap[graph.edges], axis=1),
            graph.features[perm],
        )
        a = gcn_model_forward(graph, model)
        b = gcn_model_forward(relabeled, model)
        assert abs(a - b) <= 1e-12

    def test_layer_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        graph = _random_graph(rng, 9)
        adjacency = normalize_adjacency(graph)
        w = Tensor(rng.normal(size=(3, 4)))
        out = gcn_layer_forward(adjacency, Tensor(graph.features), w).data
        perm = rng.permutation(9)
        remap = np.empty(9, dtype=int)
        remap[perm] = np.arange(9)
        shuffled = _graph(9, np.sort(remap[graph.edges], axis=1), graph.features[perm])
        out_p = gcn_layer_forward(
            normalize_adjacency(shuffled), Tensor(shuffled.features), w
        ).data
        # CSR aggregation order changes under relabeling, so equality
        # holds to rounding, not bitwise
        assert np.abs(out_p - out[perm]).max() <= 1e-12

    def test_default_parameter_count_near_paper(self):
        model = GcnModel(GcnConfig(in_features=6))
        assert abs(model.parameter_count() - 68_000) <= 0.2 * 68_000

    def test_feature_width_checked(self):
        model = self._model()
        graph = _graph(3, [[0, 1], [1, 2]], np.zeros((3, 5)))
        with pytest.raises(DimensionError):
            gcn_model_forward(graph, model)
