"""Layers and parameter containers built on the autodiff core.

A Module discovers its parameters by walking instance attributes in
definition order, so networks read like plain classes.  Buffers (running
statistics) are ordinary numpy arrays registered by name; they travel with
``state_dict`` but never receive gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DataError, ShapeError, Tensor


class Module:
    """Base class with parameter discovery, mode switching and state I/O."""

    def __init__(self):
        self.training = True
        self._buffers: list[str] = []

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        self._buffers.append(name)

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            state[name] = buf.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(own) | set(bufs)
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise DataError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise DataError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape}, model {p.data.shape}"
                )
            p.data[...] = arr
        for name, buf in bufs.items():
            arr = np.asarray(state[name])
            if arr.shape != buf.shape:
                raise DataError(
                    f"shape mismatch for '{name}': checkpoint {arr.shape}, model {buf.shape}"
                )
            buf[...] = arr


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    """Fan-in scaled uniform draw, the default weight initializer."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3, dtype=np.float64):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Tensor(
            uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.padding = kernel_size // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.weight = Tensor(
            uniform_init(rng, (out_features, in_features), in_features, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N,H,W) with running statistics.

    Training mode normalizes with biased batch statistics and folds them
    into the running buffers as running = momentum*running + (1-momentum)*batch.
    Inference mode normalizes with the running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4d tensor, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    if training:
        if n * h * w < 2:
            raise ShapeError(
                "batch_norm in train mode needs at least 2 values per channel"
            )
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.data.reshape(c)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(c)
        xhat = (x - mu) / ((var + eps) ** 0.5)
    else:
        mu = Tensor(running_mean.reshape(1, c, 1, 1).astype(x.dtype, copy=False))
        denom = np.sqrt(running_var.reshape(1, c, 1, 1) + eps).astype(x.dtype, copy=False)
        xhat = (x - mu) / Tensor(denom)
    return xhat * gamma.reshape((1, c, 1, 1)) + beta.reshape((1, c, 1, 1))


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.training, self.momentum, self.eps)


class ConvFeatures(Module):
    """Convolutional feature stack: stages of conv, batchnorm, leaky ReLU and
    2x2 max pooling with channel doubling, then one fully connected layer
    with tanh to a fixed-width feature vector.
    """

    def __init__(self, extent: int, stages: int, base_channels: int,
                 feature_dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if extent < 2 or extent & (extent - 1):
            raise ShapeError(f"input extent must be a power of two, got {extent}")
        if extent % (1 << stages):
            raise ShapeError(
                f"extent {extent} cannot be halved {stages} times"
            )
        self.extent = extent
        self.stages = stages
        self.convs: list[Conv2d] = []
        self.norms: list[BatchNorm2d] = []
        cin = 1
        for s in range(stages):
            cout = base_channels * (1 << s)
            self.convs.append(Conv2d(cin, cout, rng, dtype=dtype))
            self.norms.append(BatchNorm2d(cout, dtype=dtype))
            cin = cout
        final_spatial = extent >> stages
        self.fc = Linear(cin * final_spatial * final_spatial, feature_dim, rng, dtype=dtype)
        self.feature_dim = feature_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] != self.extent or x.shape[3] != self.extent:
            raise ShapeError(
                f"expected input of spatial extent {self.extent}x{self.extent}, "
                f"got shape {x.shape}"
            )
        for conv, norm in zip(self.convs, self.norms):
            x = maxpool_block(conv, norm, x)
        x = x.reshape((x.shape[0], -1))
        return T.tanh(self.fc(x))


def maxpool_block(conv: Conv2d, norm: BatchNorm2d, x: Tensor) -> Tensor:
    return T.maxpool2(T.leaky_relu(norm(conv(x))))
