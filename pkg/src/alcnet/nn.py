"""Layer objects: parameter registration, conv and batch-norm modules."""

import math

import numpy as np

from .autodiff import Parameter, Tensor, conv2d, global_avg_pool


def he_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean normal weights with variance 2/fan_in.

    fan_in is the product of all non-leading dims (Cin*k*k for conv kernels).
    """
    shape = tuple(int(s) for s in shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    if fan_in < 1:
        raise ValueError(f"he_init: fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Minimal container tracking parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        arr = np.asarray(value, dtype=np.float64)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{name}.")

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield (f"{prefix}{name}", b)
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix=f"{prefix}{name}.")

    def named_modules(self, prefix=""):
        yield (prefix.rstrip("."), self)
        for name, mod in self._modules.items():
            yield from mod.named_modules(prefix=f"{prefix}{name}.")

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    """k in {1,3}, stride in {1,2}, zero padding k//2, no bias (BN follows)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, rng=None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.weight = Parameter(he_init((out_channels, in_channels, kernel_size, kernel_size), rng))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride)


class BatchNorm2d(Module):
    """Per-channel normalization over the sample's spatial positions.

    Train mode normalizes with the current map's moments (the batch axis is
    an outer loop over samples) and updates running statistics with momentum
    0.9; eval mode uses the running statistics and fails loudly if no train
    step ever populated them.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.9):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.track_stats = True
        self.gamma = Parameter(np.ones((channels, 1, 1)))
        self.beta = Parameter(np.zeros((channels, 1, 1)))
        self.register_buffer("running_mean", np.zeros((channels, 1, 1)))
        self.register_buffer("running_var", np.ones((channels, 1, 1)))
        self.register_buffer("num_updates", np.zeros(1))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[0] != self.channels:
            raise ValueError(
                f"batch_norm: input has {x.data.shape[0]} channels, layer expects {self.channels}")
        if self.training:
            mean = global_avg_pool(x)
            centered = x - mean
            var = global_avg_pool(centered * centered)
            out = self.gamma * (centered / ((var + self.eps) ** 0.5)) + self.beta
            if self.track_stats:
                m = self.momentum
                self.running_mean[...] = m * self.running_mean + (1.0 - m) * mean.data
                self.running_var[...] = m * self.running_var + (1.0 - m) * var.data
                self.num_updates += 1.0
            return out
        if self.num_updates[0] == 0:
            raise RuntimeError("batch_norm: uninitialized running stats (eval before any train step)")
        scale = self.gamma * (1.0 / np.sqrt(self.running_var + self.eps))
        return scale * (x - Tensor(self.running_mean)) + self.beta


def set_stat_tracking(module: Module, enabled: bool):
    """Toggle running-stat updates on every BatchNorm2d in the tree.

    Train-mode forwards with tracking disabled are side-effect free, which is
    what per-sample inference normalization needs."""
    for _, mod in module.named_modules():
        if isinstance(mod, BatchNorm2d):
            object.__setattr__(mod, "track_stats", enabled)
