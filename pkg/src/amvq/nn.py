"""Layers, parameter containers and the Adam optimizer."""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container with train/eval mode.

    Parameters and buffers are discovered from attributes in assignment
    order, which keeps ``named_tensors()`` stable for checkpoints.
    """

    training = True

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield name, value

    def named_tensors(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        """Parameters and buffers, in a fixed order."""
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in self._own():
            out[prefix + name] = t
        for name, child in self.children():
            out.update(child.named_tensors(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def load_tensors(self, tensors: dict[str, Tensor | np.ndarray], prefix: str = "") -> None:
        own = self.named_tensors(prefix)
        missing = [k for k in own if k not in tensors]
        if missing:
            raise KeyError(f"missing tensors: {missing[:5]}")
        for name, t in own.items():
            src = tensors[name]
            arr = np.asarray(src.data if isinstance(src, Tensor) else src, dtype=np.float32)
            if arr.shape != t.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextlib.contextmanager
def frozen(module: Module) -> Iterator[Module]:
    """Temporarily treat a module's parameters as constants."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p in params:
            p.requires_grad = True


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int = 1, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, np.float32))
        self.running_var = Tensor(np.ones(channels, np.float32))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class ResidualBlock(Module):
    """``t + F(t)`` with ``F = conv -> BN -> ReLU -> conv -> BN``."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        self.conv1 = Conv2d(channels, channels, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def branch(self, t: Tensor) -> Tensor:
        return self.bn2(self.conv2(T.relu(self.bn1(self.conv1(t)))))

    def forward(self, t: Tensor) -> Tensor:
        return T.add(t, self.branch(t))


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
