"""Volumetric 3D CNN baseline on voxel occupancy grids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, DimensionError
from ..layers import BatchNorm, Conv3d, Dropout, Linear, Module, ModuleList
from ..represent import VoxelGrid
from ..tensor import Tensor, no_grad

__all__ = ["Cnn3dConfig", "Cnn3dModel", "cnn3d_model_forward"]


@dataclass
class Cnn3dConfig:
    """Twelve conv layers (ReLU + batch norm each), dropout after every
    third layer, strided downsampling, linear head."""

    input_dims: tuple[int, int, int] = (50, 60, 60)
    channels: tuple[int, ...] = (8, 8, 8, 16, 16, 16, 32, 32, 32, 64, 64, 64)
    strides: tuple[int, ...] = (1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2)
    kernel_size: int = 3
    dropout_p: float = 0.5
    dropout_after: tuple[int, ...] = (3, 6, 9)  # 1-based conv layer indices

    @classmethod
    def small(cls) -> "Cnn3dConfig":
        return cls(
            input_dims=(20, 20, 20),
            channels=(4, 4, 4, 8, 8, 8, 12, 12, 12, 16, 16, 16),
            strides=(1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2),
        )

    def __post_init__(self):
        if len(self.channels) != 12 or len(self.strides) != 12:
            raise ConfigurationError("the volumetric model uses exactly 12 conv layers")
        if len(self.dropout_after) != 3:
            raise ConfigurationError("the volumetric model uses exactly 3 dropout sites")


class Cnn3dModel(Module):
    def __init__(self, config: Cnn3dConfig):
        super().__init__()
        self.config = config
        pad = config.kernel_size // 2
        self.convs = ModuleList()
        self.norms = ModuleList()
        self.dropouts = ModuleList()
        prev = 1
        dims = np.array(config.input_dims, dtype=np.int64)
        for ch, stride in zip(config.channels, config.strides):
            self.convs.append(Conv3d(prev, ch, config.kernel_size, stride, pad))
            self.norms.append(BatchNorm(ch))
            dims = (dims + 2 * pad - config.kernel_size) // stride + 1
            prev = ch
        for _ in config.dropout_after:
            self.dropouts.append(Dropout(config.dropout_p))
        self.flat_size = int(prev * np.prod(dims))
        self.head = Linear(self.flat_size, 1)

    @property
    def output_bias(self):
        return self.head.bias

    def set_rng(self, rng: np.random.Generator):
        for d in self.dropouts:
            d.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        """(batch, 1, X, Y, Z) -> (batch,) predictions, or a (1, X, Y, Z)
        single volume -> scalar."""
        single = x.ndim == 4
        if single:
            x = x.reshape((1,) + x.shape)
        if x.shape[2:] != tuple(self.config.input_dims) or x.shape[1] != 1:
            raise DimensionError(
                f"expected (batch, 1, {self.config.input_dims}) volumes, got {x.shape}"
            )
        drop = 0
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            x = norm(conv(x).relu())
            if i in self.config.dropout_after:
                x = self.dropouts[drop](x)
                drop += 1
        x = x.reshape(x.shape[0], -1)
        out = self.head(x).reshape(x.shape[0])
        return out.reshape(()) if single else out

    __call__ = forward


def cnn3d_model_forward(grid: VoxelGrid, model: Cnn3dModel, training: bool = False) -> float:
    """Age prediction in weeks for one voxel grid; dropout acts only in
    training mode."""
    if tuple(grid.dims) != tuple(model.config.input_dims):
        raise DimensionError(
            f"grid dims {tuple(grid.dims)} do not match model input "
            f"{tuple(model.config.input_dims)}"
        )
    x = Tensor(grid.intensities[None])
    was_training = model.training
    model.train() if training else model.eval()
    try:
        if training:
            return model(x).item()
        with no_grad():
            return model(x).item()
    finally:
        model.train() if was_training else model.eval()
