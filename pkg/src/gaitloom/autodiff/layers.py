"""Parameter-holding layers wrapping the functional ops."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor

LEAKY_SLOPE = 0.2


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int,
                    slope: float = LEAKY_SLOPE, dtype=np.float32) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal container: parameter/submodule discovery via attributes."""

    training = True

    def named_parameters(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(prefix=f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(prefix=f"{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data.copy() for k, v in self.named_parameters()}
        for name, m in self._named_buffers():
            state[name] = m.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in self.named_parameters():
            v.data = state[k].astype(v.data.dtype).reshape(v.data.shape)
        for name, m in self._named_buffers():
            m[...] = state[name]

    def _named_buffers(self, prefix: str = ""):
        out = []
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Module):
                out.extend(val._named_buffers(prefix=f"{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item._named_buffers(prefix=f"{key}.{i}."))
            elif isinstance(val, np.ndarray) and name.startswith("running_"):
                out.append((key, val))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int],
                 rng: np.random.Generator, padding: tuple[int, int] = (0, 0),
                 dtype=np.float32):
        kh, kw = kernel
        fan_in = in_ch * kh * kw
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kh, kw), fan_in, dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.padding = padding

    def forward(self, x):
        y = ops.conv2d(x, self.weight, self.padding)
        return y + self.bias.reshape(1, -1, 1, 1)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float32):
        kh, kw = kernel
        fan_in = in_ch * kh * kw
        self.weight = Tensor(kaiming_uniform(rng, (in_ch, out_ch, kh, kw), fan_in, dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def forward(self, x):
        y = ops.conv_transpose2d(x, self.weight)
        return y + self.bias.reshape(1, -1, 1, 1)


class MaxPool2d(Module):
    def __init__(self, kernel: tuple[int, int], stride: tuple[int, int]):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride)


class LeakyReLU(Module):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x):
        return ops.leaky_relu(x, self.slope)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, self.training, self.momentum, self.eps)


class UpsampleNearest(Module):
    def __init__(self, factor: int):
        self.factor = factor

    def forward(self, x):
        return ops.upsample_nearest(x, self.factor)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features, dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Permute(Module):
    def __init__(self, axes: tuple[int, ...]):
        self.axes = axes

    def forward(self, x):
        return ops.permute(x, self.axes)


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
