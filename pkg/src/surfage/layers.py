"""Neural layers shared by all four architectures.

Layers follow a small Module convention: parameters are ``Parameter``
attributes discovered recursively, persistent non-learned arrays
(normalization running statistics) are exposed through ``state_arrays``
so checkpoints can roundtrip them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Parameter, Tensor, conv3d, dropout

__all__ = [
    "Module",
    "ModuleList",
    "Linear",
    "Conv3d",
    "NormState",
    "normalize_features",
    "BatchNorm",
    "GroupNorm",
    "Dropout",
    "linear",
]


class Module:
    """Base class: parameter discovery, train/eval mode, state export."""

    def __init__(self):
        self.training = True

    def modules(self):
        yield self
        for value in self.__dict__.values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, ModuleList):
                for child in value:
                    yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, value in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, ModuleList):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{path}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self, prefix: str = ""):
        """Named persistent arrays beyond parameters (running stats)."""
        for name, value in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.state_arrays(f"{path}.")
            elif isinstance(value, ModuleList):
                for i, child in enumerate(value):
                    yield from child.state_arrays(f"{path}.{i}.")
        yield from self._own_state(prefix)

    def _own_state(self, prefix: str):
        return ()

    def set_state_array(self, path: str, value: np.ndarray):
        head, _, rest = path.partition(".")
        child = self.__dict__.get(head)
        if isinstance(child, Module):
            return child.set_state_array(rest, value)
        if isinstance(child, ModuleList):
            index, _, tail = rest.partition(".")
            return child[int(index)].set_state_array(tail, value)
        raise KeyError(f"no persistent array at {path!r}")

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class ModuleList(list):
    """Plain list of submodules that parameter discovery understands."""


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = xW + b for a batch of row vectors."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"linear expects (n, in) @ (in, out); got x {x.shape}, w {w.shape}"
        )
    return x @ w + b


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    __call__ = forward


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=0):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        k = kernel_size if isinstance(kernel_size, tuple) else (kernel_size,) * 3
        self.kernel_size = k
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(np.zeros((out_channels, in_channels) + k))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    __call__ = forward


@dataclass
class NormState:
    """Learned scale/shift plus running statistics for one channel axis."""

    channels: int
    momentum: float = 0.1
    epsilon: float = 1e-5
    gamma: Parameter = field(init=False)
    beta: Parameter = field(init=False)
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ConfigurationError("epsilon must be positive")
        self.gamma = Parameter(np.ones(self.channels))
        self.beta = Parameter(np.zeros(self.channels))
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)


def _channel_shape(x: Tensor, channels: int):
    if x.ndim < 2 or x.shape[1] != channels:
        raise DimensionError(
            f"expected channel extent {channels} on axis 1, got input {x.shape}"
        )
    return (1, channels) + (1,) * (x.ndim - 2)


def normalize_features(
    x: Tensor,
    mode: str,
    groups: int,
    state: NormState,
    training: bool,
) -> Tensor:
    """Batch or group normalization over the channel axis (axis 1).

    Batch mode normalizes each channel over all remaining axes using
    batch statistics in training (updating running statistics by
    ``state.momentum``) and running statistics in evaluation. Group
    mode normalizes each sample over ``groups`` channel groups and
    keeps no running state. Both then scale by gamma and shift by beta.
    """
    cshape = _channel_shape(x, state.channels)
    gamma = state.gamma.reshape(cshape)
    beta = state.beta.reshape(cshape)

    if mode == "batch":
        axes = (0,) + tuple(range(2, x.ndim))
        if training:
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(-1)
            state.running_var = (1 - m) * state.running_var + m * var.data.reshape(-1)
        else:
            mu = Tensor(state.running_mean.reshape(cshape))
            var = Tensor(state.running_var.reshape(cshape))
        xhat = (x - mu) / (var + state.epsilon).sqrt()
        return gamma * xhat + beta

    if mode == "group":
        if state.channels % groups != 0:
            raise ConfigurationError(
                f"{groups} groups do not divide {state.channels} channels"
            )
        n = x.shape[0]
        grouped = x.reshape((n, groups, -1) )
        axes = (2,)
        mu = grouped.mean(axis=axes, keepdims=True)
        var = ((grouped - mu) ** 2).mean(axis=axes, keepdims=True)
        xhat = ((grouped - mu) / (var + state.epsilon).sqrt()).reshape(x.shape)
        return gamma * xhat + beta

    raise ConfigurationError(f"unknown normalization mode {mode!r}")


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        super().__init__()
        self.state = NormState(channels, momentum, epsilon)

    @property
    def gamma(self):
        return self.state.gamma

    @property
    def beta(self):
        return self.state.beta

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}gamma", self.state.gamma
        yield f"{prefix}beta", self.state.beta

    def _own_state(self, prefix: str):
        yield f"{prefix}running_mean", self.state.running_mean
        yield f"{prefix}running_var", self.state.running_var

    def set_state_array(self, path: str, value: np.ndarray):
        if path not in ("running_mean", "running_var"):
            raise KeyError(f"no persistent array at {path!r}")
        setattr(self.state, path, np.array(value, dtype=np.float64))

    def forward(self, x: Tensor) -> Tensor:
        return normalize_features(x, "batch", 1, self.state, self.training)

    __call__ = forward


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, epsilon: float = 1e-5):
        super().__init__()
        if channels % groups != 0:
            raise ConfigurationError(f"{groups} groups do not divide {channels} channels")
        self.groups = groups
        self.state = NormState(channels, epsilon=epsilon)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}gamma", self.state.gamma
        yield f"{prefix}beta", self.state.beta

    def forward(self, x: Tensor) -> Tensor:
        return normalize_features(x, "group", self.groups, self.state, self.training)

    __call__ = forward


class Dropout(Module):
    """Inverted dropout; the generator is injected by the training loop."""

    def __init__(self, p: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        if self.rng is None:
            self.rng = np.random.default_rng(0)
        return dropout(x, self.p, True, self.rng)

    __call__ = forward
