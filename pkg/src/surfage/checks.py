"""Registry of finite-difference gradient checks over every layer and
one tiny end-to-end model per architecture.

Inputs and parameters are seeded and nudged away from ReLU kinks so
central differences are valid; all checks should sit well under the
1e-4 relative error gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcheck import finite_diff_gradcheck, gradcheck_many
from .layers import BatchNorm, Dropout, GroupNorm, Linear, normalize_features
from .mesh import SurfaceMesh
from .models.cnn3d import Cnn3dConfig, Cnn3dModel
from .models.gcn import GcnConfig, GcnModel
from .models.meshcnn import (
    MeshCnnConfig,
    MeshCnnModel,
    build_edge_mesh,
    compute_edge_features,
)
from .models.pointnet import PointNetConfig, PointNetModel, SetAbstractionConfig
from .represent import PointCloudSample, SurfaceGraph
from .tensor import Tensor, conv3d, dropout, set_pool
from .training import init_weights

__all__ = ["CheckResult", "run_gradient_checks", "GRADCHECK_GATE"]

GRADCHECK_GATE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRADCHECK_GATE


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _tetrahedron() -> SurfaceMesh:
    verts = np.array([[1.0, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]])
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return SurfaceMesh(verts, faces)


def _check_linear() -> float:
    rng = _rng(0)
    layer = Linear(4, 3)
    layer.weight.data = rng.normal(size=(4, 3))
    layer.bias.data = rng.normal(size=3)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    f = lambda: (layer(x) ** 2).sum()
    return gradcheck_many(f, [x, layer.weight, layer.bias])


def _check_relu() -> float:
    rng = _rng(1)
    # keep pre-activations away from the kink
    x = Tensor(rng.normal(size=12) + np.where(rng.random(12) > 0.5, 0.6, -0.6),
               requires_grad=True)
    weights = Tensor(rng.normal(size=12))
    return finite_diff_gradcheck(lambda t: (t.relu() * weights).sum(), x)


def _check_conv3d() -> float:
    rng = _rng(2)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    f = lambda: (conv3d(x, w, b, stride=2, padding=1) ** 2).sum()
    return gradcheck_many(f, [x, w, b])


def _check_batch_norm_training() -> float:
    rng = _rng(3)
    norm = BatchNorm(3)
    norm.state.gamma.data = rng.normal(size=3) + 1.5
    norm.state.beta.data = rng.normal(size=3)
    x = Tensor(rng.normal(size=(6, 3)) * 2.0, requires_grad=True)
    weights = Tensor(rng.normal(size=(6, 3)))

    def f():
        out = normalize_features(x, "batch", 1, norm.state, training=True)
        return (out * weights).sum()

    return gradcheck_many(f, [x, norm.state.gamma, norm.state.beta])


def _check_group_norm() -> float:
    rng = _rng(4)
    norm = GroupNorm(4, 2)
    norm.state.gamma.data = rng.normal(size=4) + 1.5
    x = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    weights = Tensor(rng.normal(size=(3, 4, 5)))

    def f():
        out = normalize_features(x, "group", 2, norm.state, training=True)
        return (out * weights).sum()

    return gradcheck_many(f, [x, norm.state.gamma, norm.state.beta])


def _check_dropout_fixed_mask() -> float:
    rng = _rng(5)
    x = Tensor(rng.normal(size=40), requires_grad=True)
    weights = Tensor(rng.normal(size=40))

    def f(t):
        # reseeding per call fixes the mask, making f pure
        return (dropout(t, 0.4, True, np.random.default_rng(99)) * weights).sum()

    return finite_diff_gradcheck(f, x)


def _check_set_pool() -> float:
    rng = _rng(6)
    x = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    wmax = Tensor(rng.normal(size=4))
    wmean = Tensor(rng.normal(size=4))

    def f(t):
        return (set_pool(t, "max") * wmax).sum() + (set_pool(t, "mean") * wmean).sum()

    return finite_diff_gradcheck(f, x)


def _check_mesh_conv() -> float:
    rng = _rng(7)
    mesh = _tetrahedron()
    edge_mesh = build_edge_mesh(mesh)
    feats = Tensor(rng.normal(size=(edge_mesh.edge_count, 3)), requires_grad=True)
    from .models.meshcnn import MeshConv

    conv = MeshConv(3, 2)
    for k in (conv.k0, conv.k1, conv.k2, conv.k3, conv.k4):
        k.data = rng.normal(size=k.shape) * 0.5
    conv.bias.data = rng.normal(size=2)
    weights = Tensor(rng.normal(size=(edge_mesh.edge_count, 2)))

    def f():
        return (conv(feats, edge_mesh) * weights).sum()

    return gradcheck_many(
        f, [feats, conv.k0, conv.k1, conv.k2, conv.k3, conv.k4, conv.bias]
    )


def _check_gcn_layer() -> float:
    rng = _rng(8)
    from .models.gcn import GcnLayer, normalize_adjacency

    graph = SurfaceGraph(4, np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]),
                         rng.normal(size=(4, 3)) + 0.8)
    adjacency = normalize_adjacency(graph)
    layer = GcnLayer(3, 2)
    layer.weight.data = np.abs(rng.normal(size=(3, 2))) + 0.2  # keep ReLU active
    layer.bias.data = rng.normal(size=2) * 0.1 + 0.5
    x = Tensor(np.abs(graph.features), requires_grad=True)
    weights = Tensor(rng.normal(size=(4, 2)))

    def f():
        return (layer(adjacency, x) * weights).sum()

    return gradcheck_many(f, [x, layer.weight, layer.bias])


def _check_set_abstraction() -> float:
    rng = _rng(9)
    from .models.pointnet import SetAbstraction

    sa = SetAbstraction(SetAbstractionConfig(4, 0.9, 8, (6, 5)), in_features=2)
    init_weights(sa, "kaiming_normal", rng)
    sa.eval()
    positions = rng.normal(size=(16, 3)) * 0.5
    feats = Tensor(rng.normal(size=(16, 2)), requires_grad=True)
    weights = Tensor(rng.normal(size=(4, 5)))

    def f():
        _, pooled = sa(positions, feats)
        return (pooled * weights).sum()

    return gradcheck_many(f, [feats] + [p for _, p in sa.named_parameters()])


def _check_pointnet_tiny() -> float:
    rng = _rng(10)
    cfg = PointNetConfig(
        in_features=1,
        levels=(
            SetAbstractionConfig(8, 0.8, 6, (6,)),
            SetAbstractionConfig(4, 1.2, 6, (6,)),
            SetAbstractionConfig(2, 1.6, 4, (8,)),
        ),
        global_widths=(8,),
        head_widths=(6,),
    )
    model = PointNetModel(cfg)
    init_weights(model, "kaiming_normal", rng)
    model.eval()
    samples = [
        PointCloudSample(rng.normal(size=(32, 3)), rng.normal(size=(32, 1)))
        for _ in range(2)
    ]

    def f():
        return (model.forward_batch(samples) ** 2).sum()

    return gradcheck_many(f, [p for _, p in model.named_parameters()])


def _check_gcn_tiny() -> float:
    rng = _rng(11)
    model = GcnModel(GcnConfig(in_features=3, hidden=(5, 4)))
    init_weights(model, "glorot_uniform", rng)
    graph = SurfaceGraph(
        4,
        np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]),
        rng.normal(size=(4, 3)) + 0.5,
    )

    def f():
        return model(graph) ** 2

    return gradcheck_many(f, [p for _, p in model.named_parameters()])


def _check_meshcnn_tiny() -> float:
    rng = _rng(12)
    model = MeshCnnModel(MeshCnnConfig(conv_widths=(4,), pool_ratios=(), norm_groups=2))
    init_weights(model, "kaiming_normal", rng)
    mesh = _tetrahedron()
    edge_mesh = build_edge_mesh(mesh)
    feats = compute_edge_features(edge_mesh)

    def f():
        return model(edge_mesh, feats) ** 2

    return gradcheck_many(f, [p for _, p in model.named_parameters()])


def _check_cnn3d_reduced() -> float:
    rng = _rng(13)
    from .layers import Conv3d

    conv1 = Conv3d(1, 2, 3, stride=1, padding=1)
    conv2 = Conv3d(2, 2, 3, stride=2, padding=1)
    head = Linear(2 * 27, 1)
    for m in (conv1, conv2, head):
        init_weights(m, "kaiming_normal", rng)
    x = Tensor(rng.random(size=(1, 6, 6, 6)), requires_grad=True)

    def f():
        h = conv2(conv1(x).relu()).relu()
        return head(h.reshape(1, -1)).reshape(()) ** 2

    params = [x, conv1.weight, conv1.bias, conv2.weight, conv2.bias,
              head.weight, head.bias]
    return gradcheck_many(f, params)


_REGISTRY = [
    ("linear", _check_linear),
    ("relu", _check_relu),
    ("conv3d", _check_conv3d),
    ("batch_norm", _check_batch_norm_training),
    ("group_norm", _check_group_norm),
    ("dropout", _check_dropout_fixed_mask),
    ("set_pool", _check_set_pool),
    ("mesh_conv", _check_mesh_conv),
    ("gcn_layer", _check_gcn_layer),
    ("set_abstraction", _check_set_abstraction),
    ("pointnet_tiny_model", _check_pointnet_tiny),
    ("gcn_tiny_model", _check_gcn_tiny),
    ("meshcnn_tiny_model", _check_meshcnn_tiny),
    ("cnn3d_reduced_model", _check_cnn3d_reduced),
]


def run_gradient_checks() -> list[CheckResult]:
    return [CheckResult(name, fn()) for name, fn in _REGISTRY]
