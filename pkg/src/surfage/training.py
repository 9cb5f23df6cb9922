"""Losses, optimizer, schedulers, initializers, training and evaluation.

One training loop serves all four architectures through small adapters
that know how to turn a manifest record into a model input and how to
run a batch. Everything is driven by one seeded generator, so a
(seed, manifest, settings) triple fully determines the training log
and the checkpoint bytes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    DimensionError,
    EmptySetError,
    SplitError,
    TrainingDivergedError,
)
from .layers import BatchNorm, Conv3d, GroupNorm, Linear, Module
from .cohort import CohortManifest, ScanRecord
from .mesh import load_mesh
from .models.cnn3d import Cnn3dConfig, Cnn3dModel
from .models.gcn import GcnConfig, GcnLayer, GcnModel, normalize_adjacency
from .models.meshcnn import (
    MeshCnnConfig,
    MeshCnnModel,
    MeshConv,
    build_edge_mesh,
    compute_edge_features,
)
from .models.pointnet import PointNetConfig, PointNetModel
from .represent import VoxelGrid, to_graph, to_point_cloud, voxelize
from .tensor import Tensor, backward, fresh_tape, no_grad, stack

__all__ = [
    "compute_loss",
    "Adam",
    "ScheduleSpec",
    "make_scheduler",
    "init_weights",
    "TrainSettings",
    "default_train_settings",
    "train",
    "evaluate",
    "EvalReport",
    "ModelCheckpoint",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
    "ARCHITECTURES",
]


# -- losses -------------------------------------------------------------------


def compute_loss(pred: Tensor, target, kind: str) -> Tensor:
    """Mean absolute or mean squared error over a batch of scalars."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.size == 0:
        raise EmptySetError("loss over an empty batch")
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} does not match target {target.shape}"
        )
    diff = pred - target
    if kind == "l1":
        return diff.abs().mean()
    if kind == "mse":
        return (diff ** 2).mean()
    raise ConfigurationError(f"unknown loss kind {kind!r}")


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match parameter {p.data.shape}"
                )
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- schedulers ---------------------------------------------------------------


@dataclass
class ScheduleSpec:
    """One of exponential(gamma), cosine(t_max, lr_min) or
    plateau(factor, patience, lr_min)."""

    kind: str
    lr0: float
    gamma: float = 0.0
    t_max: int = 0
    lr_min: float = 0.0
    factor: float = 0.5
    patience: int = 10
    threshold: float = 1e-4


class _Exponential:
    def __init__(self, spec: ScheduleSpec):
        self.spec = spec

    def lr_at(self, epoch: int, val_metric: float | None = None) -> float:
        return self.spec.lr0 * self.spec.gamma ** epoch


class _Cosine:
    def __init__(self, spec: ScheduleSpec):
        self.spec = spec

    def lr_at(self, epoch: int, val_metric: float | None = None) -> float:
        s = self.spec
        if epoch >= s.t_max:
            return s.lr_min
        return s.lr_min + 0.5 * (s.lr0 - s.lr_min) * (
            1.0 + math.cos(math.pi * epoch / s.t_max)
        )


class _Plateau:
    def __init__(self, spec: ScheduleSpec):
        self.spec = spec
        self.current = spec.lr0
        self.best: float | None = None
        self.bad_epochs = 0

    def lr_at(self, epoch: int, val_metric: float | None = None) -> float:
        if val_metric is None:
            raise ConfigurationError("plateau scheduling needs a validation metric")
        s = self.spec
        if self.best is None or val_metric < self.best - s.threshold:
            self.best = val_metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= s.patience:
                self.current = max(self.current * s.factor, s.lr_min)
                self.bad_epochs = 0
        return self.current


def make_scheduler(spec: ScheduleSpec):
    kinds = {"exponential": _Exponential, "cosine": _Cosine, "plateau": _Plateau}
    if spec.kind not in kinds:
        raise ConfigurationError(f"unknown scheduler kind {spec.kind!r}")
    return kinds[spec.kind](spec)


# -- initialization -------------------------------------------------------------


def _fan(module) -> tuple[int, int]:
    if isinstance(module, Linear) or isinstance(module, GcnLayer):
        return module.in_features, module.out_features
    if isinstance(module, Conv3d):
        k = int(np.prod(module.kernel_size))
        return module.in_channels * k, module.out_channels * k
    if isinstance(module, MeshConv):
        return 5 * module.in_features, module.out_features
    raise ConfigurationError(f"no fan rule for {type(module).__name__}")


def init_weights(model: Module, scheme: str, rng: np.random.Generator):
    """Initialize weights by the named scheme; biases and norm shifts
    are zero, norm scales one. Deterministic in module order."""
    if scheme not in ("kaiming_normal", "glorot_uniform"):
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    for module in model.modules():
        if isinstance(module, (Linear, GcnLayer, Conv3d, MeshConv)):
            fan_in, fan_out = _fan(module)
            weights = [module.weight] if hasattr(module, "weight") else []
            if isinstance(module, MeshConv):
                weights = [module.k0, module.k1, module.k2, module.k3, module.k4]
            for w in weights:
                if scheme == "kaiming_normal":
                    w.data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=w.shape)
                else:
                    limit = math.sqrt(6.0 / (fan_in + fan_out))
                    w.data = rng.uniform(-limit, limit, size=w.shape)
            module.bias.data = np.zeros_like(module.bias.data)
        elif isinstance(module, (BatchNorm, GroupNorm)):
            module.state.gamma.data = np.ones_like(module.state.gamma.data)
            module.state.beta.data = np.zeros_like(module.state.beta.data)


# -- settings -------------------------------------------------------------------


@dataclass
class TrainSettings:
    """Everything a training run needs beyond the manifest and seed."""

    architecture: str
    profile: str = "paper"              # paper-scale or desk-scale widths
    features: tuple[str, ...] = ()      # per-vertex channels fed to the model
    epochs: int = 100
    batch_size: int = 8
    loss: str = "mse"
    init: str = "kaiming_normal"
    schedule: ScheduleSpec = field(
        default_factory=lambda: ScheduleSpec("plateau", 1e-3, lr_min=5e-5)
    )
    voxel_dims: tuple[int, int, int] = (50, 60, 60)
    voxel_extent: float | None = None   # shared mm extent; None fits per mesh

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        d["voxel_dims"] = list(self.voxel_dims)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainSettings":
        d = dict(d)
        d["schedule"] = ScheduleSpec(**d["schedule"])
        d["features"] = tuple(d["features"])
        d["voxel_dims"] = tuple(d["voxel_dims"])
        return cls(**d)


def default_train_settings(
    architecture: str, profile: str = "paper", features: tuple[str, ...] = ()
) -> TrainSettings:
    """Published per-architecture training recipes; the small profile
    shrinks widths, epochs and volumes but never the update rules."""
    small = profile == "small"
    if architecture == "cnn3d":
        return TrainSettings(
            architecture, profile, (),
            epochs=60 if small else 1000,
            batch_size=32,
            loss="l1",
            init="kaiming_normal",
            schedule=ScheduleSpec("exponential", 6.88e-3, gamma=0.9795),
            voxel_dims=(20, 20, 20) if small else (50, 60, 60),
            voxel_extent=3.4 if small else None,
        )
    if architecture == "pointnet":
        return TrainSettings(
            architecture, profile, features,
            epochs=60 if small else 200,
            batch_size=8,
            loss="mse",
            init="kaiming_normal",
            schedule=ScheduleSpec(
                "plateau", 1e-3, lr_min=5e-5, factor=0.5, patience=5
            ),
        )
    if architecture == "meshcnn":
        return TrainSettings(
            architecture, profile, (),
            epochs=30 if small else 200,
            batch_size=1,
            loss="mse",
            init="kaiming_normal",
            schedule=ScheduleSpec(
                "plateau", 3e-4, lr_min=3e-5, factor=0.5, patience=10
            ),
        )
    if architecture == "gcn":
        return TrainSettings(
            architecture, profile, features,
            epochs=60 if small else 100,
            batch_size=8,
            loss="mse",
            init="glorot_uniform",
            schedule=ScheduleSpec(
                "cosine", 8e-4, t_max=60 if small else 10, lr_min=1e-6
            ),
        )
    raise ConfigurationError(f"unknown architecture {architecture!r}")


# -- architecture adapters --------------------------------------------------------


def _channel_stats(manifest: CohortManifest, records, features) -> dict:
    """Per-channel (mean, std) over the given records' vertices."""
    if not features:
        return {}
    gathered: dict[str, list[np.ndarray]] = {name: [] for name in features}
    for record in records:
        mesh = load_mesh(
            manifest.resolve(record.mesh_path), manifest.resolve(record.feature_path)
        )
        for name in features:
            gathered[name].append(mesh.channels[name])
    return {
        name: (float(np.mean(np.concatenate(v))), float(np.std(np.concatenate(v))))
        for name, v in gathered.items()
    }


class _PointNetAdapter:
    name = "pointnet"

    def build_model(self, settings: TrainSettings) -> Module:
        width = len(settings.features)
        cfg = (
            PointNetConfig.small(width)
            if settings.profile == "small"
            else PointNetConfig(width)
        )
        return PointNetModel(cfg)

    def load_sample(self, record, manifest, settings, stats):
        mesh = load_mesh(
            manifest.resolve(record.mesh_path), manifest.resolve(record.feature_path)
        )
        return to_point_cloud(mesh, settings.features, stats or None)

    def forward_batch(self, model, samples) -> Tensor:
        return model.forward_batch(samples)

    def predict(self, model, sample) -> float:
        return model(sample).item()


class _GcnAdapter:
    name = "gcn"

    def build_model(self, settings: TrainSettings) -> Module:
        width = 3 + len(settings.features)
        cfg = (
            GcnConfig.small(width) if settings.profile == "small" else GcnConfig(width)
        )
        return GcnModel(cfg)

    def load_sample(self, record, manifest, settings, stats):
        mesh = load_mesh(
            manifest.resolve(record.mesh_path), manifest.resolve(record.feature_path)
        )
        graph = to_graph(mesh, settings.features, stats or None)
        return graph, normalize_adjacency(graph)

    def forward_batch(self, model, samples) -> Tensor:
        return stack([model(graph, adj) for graph, adj in samples])

    def predict(self, model, sample) -> float:
        graph, adj = sample
        return model(graph, adj).item()


class _MeshCnnAdapter:
    name = "meshcnn"

    def build_model(self, settings: TrainSettings) -> Module:
        cfg = MeshCnnConfig.small() if settings.profile == "small" else MeshCnnConfig()
        return MeshCnnModel(cfg)

    def load_sample(self, record, manifest, settings, stats):
        mesh = load_mesh(manifest.resolve(record.mesh_path))
        edge_mesh = build_edge_mesh(mesh)
        return edge_mesh, compute_edge_features(edge_mesh)

    def forward_batch(self, model, samples) -> Tensor:
        return stack([model(em, feats) for em, feats in samples])

    def predict(self, model, sample) -> float:
        edge_mesh, feats = sample
        return model(edge_mesh, feats).item()


class _Cnn3dAdapter:
    name = "cnn3d"

    def build_model(self, settings: TrainSettings) -> Module:
        if settings.profile == "small":
            cfg = Cnn3dConfig.small()
            cfg = Cnn3dConfig(
                input_dims=tuple(settings.voxel_dims),
                channels=cfg.channels,
                strides=cfg.strides,
            )
        else:
            cfg = Cnn3dConfig(input_dims=tuple(settings.voxel_dims))
        return Cnn3dModel(cfg)

    def load_sample(self, record, manifest, settings, stats):
        mesh_path = manifest.resolve(record.mesh_path)
        cache = mesh_path.with_name(mesh_path.stem + "_voxels.npy")
        if cache.exists():
            grid = np.load(cache)
            if tuple(grid.shape) != tuple(settings.voxel_dims):
                raise DimensionError(
                    f"cached voxels {grid.shape} do not match requested "
                    f"{settings.voxel_dims}; re-run preprocessing"
                )
            return grid
        mesh = load_mesh(mesh_path)
        return voxelize(mesh, settings.voxel_dims, settings.voxel_extent).intensities

    def forward_batch(self, model, samples) -> Tensor:
        batch = Tensor(np.stack(samples)[:, None])
        return model(batch)

    def predict(self, model, sample) -> float:
        return model(Tensor(sample[None])).item()


ARCHITECTURES = {
    adapter.name: adapter
    for adapter in (_PointNetAdapter(), _GcnAdapter(), _MeshCnnAdapter(), _Cnn3dAdapter())
}


def build_model(settings: TrainSettings) -> Module:
    if settings.architecture not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {settings.architecture!r}")
    return ARCHITECTURES[settings.architecture].build_model(settings)


# -- checkpoints -----------------------------------------------------------------


CHECKPOINT_MAGIC = b"GDLM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelCheckpoint:
    architecture: str
    settings: TrainSettings
    channel_stats: dict
    metadata: dict
    tensors: dict[str, np.ndarray]


def _model_tensors(model: Module) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in model.named_parameters()}
    for name, arr in model.state_arrays():
        out[name] = arr
    return out


def apply_tensors(model: Module, tensors: dict[str, np.ndarray]):
    params = dict(model.named_parameters())
    state_names = {name for name, _ in model.state_arrays()}
    for name, value in tensors.items():
        if name in params:
            if params[name].data.shape != value.shape:
                raise ArchitectureMismatchError(
                    f"tensor {name} has shape {value.shape}, model expects "
                    f"{params[name].data.shape}"
                )
            params[name].data = np.array(value, dtype=np.float64)
        elif name in state_names:
            model.set_state_array(name, value)
        else:
            raise ArchitectureMismatchError(f"checkpoint tensor {name} not in model")


def save_checkpoint(checkpoint: ModelCheckpoint, path) -> Path:
    """GDLM binary: magic, u32 version, length-prefixed JSON header,
    then named float32 little-endian tensor blocks."""
    path = Path(path)
    header = json.dumps(
        {
            "architecture": checkpoint.architecture,
            "settings": checkpoint.settings.to_json_dict(),
            "channel_stats": checkpoint.channel_stats,
            "metadata": checkpoint.metadata,
        },
        sort_keys=True,
    ).encode()
    names = sorted(checkpoint.tensors)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(checkpoint.tensors[name], dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    return path


def load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    blob = path.read_bytes()

    def take(count: int, what: str) -> bytes:
        nonlocal cursor
        if cursor + count > len(blob):
            raise CheckpointTruncatedError(f"{path}: truncated while reading {what}")
        piece = blob[cursor : cursor + count]
        cursor = cursor + count
        return piece

    cursor = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a GDLM checkpoint")
    version, header_len = struct.unpack("<II", take(8, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, supported {CHECKPOINT_VERSION}"
        )
    header = json.loads(take(header_len, "header"))
    (n_tensors,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode()
        (ndim,) = struct.unpack("<B", take(1, "tensor rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
        count = int(np.prod(shape)) if ndim else 1
        raw = take(4 * count, f"tensor {name}")
        tensors[name] = (
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        )
    return ModelCheckpoint(
        header["architecture"],
        TrainSettings.from_json_dict(header["settings"]),
        {k: tuple(v) for k, v in header["channel_stats"].items()},
        header["metadata"],
        tensors,
    )


# -- training -----------------------------------------------------------------


def _check_finite(value: float, epoch: int, batch: int):
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss {value} at epoch {epoch}, batch {batch}"
        )


def train(
    manifest: CohortManifest,
    architecture: str,
    settings: TrainSettings | None = None,
    seed: int = 0,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Seeded training loop; returns the best-validation checkpoint and
    the per-epoch log of train loss, validation MAE and learning rate."""
    if settings is None:
        settings = default_train_settings(architecture)
    if settings.architecture != architecture:
        raise ConfigurationError("settings do not belong to this architecture")
    adapter = ARCHITECTURES.get(architecture)
    if adapter is None:
        raise ConfigurationError(f"unknown architecture {architecture!r}")
    train_records = manifest.split("train")
    val_records = manifest.split("val")
    if not train_records or not val_records:
        raise SplitError("training needs nonempty train and val splits")

    rng = np.random.default_rng(seed)
    stats = _channel_stats(manifest, train_records, settings.features)
    model = adapter.build_model(settings)
    init_weights(model, settings.init, rng)
    # warm-start the scalar head at the train-target mean so the
    # optimizer only has to fit residuals within the epoch budget
    model.output_bias.data = np.array(
        [float(np.mean([r.scan_age_weeks for r in train_records]))]
    )
    if hasattr(model, "set_rng"):
        model.set_rng(rng)

    train_samples = [
        adapter.load_sample(r, manifest, settings, stats) for r in train_records
    ]
    val_samples = [
        adapter.load_sample(r, manifest, settings, stats) for r in val_records
    ]
    train_targets = np.array([r.scan_age_weeks for r in train_records])
    val_targets = np.array([r.scan_age_weeks for r in val_records])

    optimizer = Adam(list(model.parameters()), settings.schedule.lr0)
    scheduler = make_scheduler(settings.schedule)
    log: list[dict] = []
    best_val = math.inf
    best_tensors: dict[str, np.ndarray] = {
        k: v.copy() for k, v in _model_tensors(model).items()
    }
    best_epoch = -1
    lr = settings.schedule.lr0

    for epoch in range(settings.epochs):
        if settings.schedule.kind in ("exponential", "cosine"):
            lr = scheduler.lr_at(epoch)
        optimizer.lr = lr
        model.train()
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), settings.batch_size)):
            picked = order[start : start + settings.batch_size]
            with fresh_tape():
                preds = adapter.forward_batch(model, [train_samples[i] for i in picked])
                loss = compute_loss(preds, train_targets[picked], settings.loss)
                _check_finite(loss.item(), epoch, b)
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
            epoch_loss += loss.item() * len(picked)
        epoch_loss /= len(order)

        model.eval()
        with no_grad():
            val_preds = np.array(
                [adapter.predict(model, s) for s in val_samples]
            )
        val_mae = float(np.mean(np.abs(val_preds - val_targets)))
        _check_finite(val_mae, epoch, -1)
        if val_mae < best_val:
            best_val = val_mae
            best_epoch = epoch
            best_tensors = {k: v.copy() for k, v in _model_tensors(model).items()}
        log.append(
            {"epoch": epoch, "train_loss": epoch_loss, "val_mae": val_mae, "lr": lr}
        )
        if settings.schedule.kind == "plateau":
            lr = scheduler.lr_at(epoch, val_mae)

    checkpoint = ModelCheckpoint(
        architecture,
        settings,
        stats,
        {"seed": seed, "best_epoch": best_epoch, "best_val_mae": best_val},
        best_tensors,
    )
    return checkpoint, log


# -- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list[dict]       # scan_id, subject_id, target, prediction, abs_error
    mae: float
    std: float             # population std of the absolute errors

    def consistent(self) -> bool:
        errors = np.array([r["abs_error"] for r in self.rows])
        return bool(
            np.isclose(self.mae, errors.mean()) and np.isclose(self.std, errors.std())
        )


def evaluate(
    manifest: CohortManifest, split: str, checkpoint: ModelCheckpoint
) -> EvalReport:
    """Evaluation-mode predictions for every scan in the split."""
    records = manifest.split(split)
    if not records:
        raise SplitError(f"split {split!r} is empty")
    adapter = ARCHITECTURES[checkpoint.architecture]
    model = adapter.build_model(checkpoint.settings)
    apply_tensors(model, checkpoint.tensors)
    model.eval()
    rows = []
    with no_grad():
        for record in records:
            sample = adapter.load_sample(
                record, manifest, checkpoint.settings, checkpoint.channel_stats
            )
            prediction = adapter.predict(model, sample)
            rows.append(
                {
                    "subject_id": record.subject_id,
                    "scan_id": record.scan_id,
                    "target_weeks": record.scan_age_weeks,
                    "prediction_weeks": prediction,
                    "abs_error": abs(prediction - record.scan_age_weeks),
                }
            )
    errors = np.array([r["abs_error"] for r in rows])
    return EvalReport(rows, float(errors.mean()), float(errors.std()))
