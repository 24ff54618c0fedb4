"""Parameterised layers.

Layers declare their parameters as :class:`ParamSpec` entries when built and
only allocate storage on :meth:`Module.initialize`.  This keeps shape and
complexity analysis of the full-size model free of weight allocation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import layers as L
from .errors import ShapeError
from .tensor import Rng, Tensor, he_normal_init


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple
    init: str = "zeros"  # he | zeros | ones | const
    fan_in: int = 0
    value: float = 0.0
    trainable: bool = True

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class ComplexityRow:
    name: str
    kind: str
    out_shape: tuple
    params: int
    trainable: int
    flops: int


class Module:
    kind = "module"

    def __init__(self):
        self._specs: dict[str, ParamSpec] = {}
        self._values: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module) and "_children" in self.__dict__:
            self._children[name] = value
        object.__setattr__(self, name, value)

    def __getattr__(self, name):
        children = self.__dict__.get("_children", {})
        if name in children:
            return children[name]
        raise AttributeError(name)

    def declare(self, name: str, shape, init: str = "zeros", fan_in: int = 0,
                value: float = 0.0, trainable: bool = True) -> None:
        self._specs[name] = ParamSpec(tuple(int(s) for s in shape), init, fan_in, value, trainable)

    def param(self, name: str) -> Tensor:
        try:
            return self._values[name]
        except KeyError:
            raise RuntimeError(f"{type(self).__name__} is not initialised; call initialize() first") from None

    # -- traversal -------------------------------------------------------

    def children(self) -> Iterator[tuple[str, "Module"]]:
        return iter(self._children.items())

    def named_specs(self, prefix: str = "") -> Iterator[tuple[str, ParamSpec, "Module", str]]:
        for local, spec in self._specs.items():
            yield prefix + local, spec, self, local
        for cname, child in self._children.items():
            yield from child.named_specs(f"{prefix}{cname}.")

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, _spec, owner, local in self.named_specs():
            yield name, owner.param(local)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, spec, owner, local in self.named_specs():
            if spec.trainable:
                yield name, owner.param(local)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        for name, spec, owner, local in self.named_specs():
            if not spec.trainable:
                yield name, owner.param(local)

    def initialize(self, rng: Rng, dtype=np.float32) -> "Module":
        """Allocate every declared tensor, drawing He-normal weights from ``rng`` in declaration order."""
        for name, spec, owner, local in self.named_specs():
            if spec.init == "he":
                data = he_normal_init(rng, spec.shape, spec.fan_in, dtype=dtype).data
            elif spec.init == "ones":
                data = np.ones(spec.shape, dtype=dtype)
            elif spec.init == "const":
                data = np.full(spec.shape, spec.value, dtype=dtype)
            else:
                data = np.zeros(spec.shape, dtype=dtype)
            owner._values[local] = Tensor(data, requires_grad=spec.trainable, name=name)
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- execution and analysis -----------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def param_count(self) -> int:
        return sum(spec.size for _, spec, _, _ in self.named_specs())

    def trainable_count(self) -> int:
        return sum(spec.size for _, spec, _, _ in self.named_specs() if spec.trainable)

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def flops(self, in_shape: tuple, out_shape: tuple) -> int:
        return 0

    def complexity(self, in_shape: tuple, name: str) -> tuple[tuple, list[ComplexityRow]]:
        """Shape inference plus per-layer counts for a single sample ``in_shape``."""
        out = self.out_shape(in_shape)
        row = ComplexityRow(name, self.kind, out, self.param_count(), self.trainable_count(),
                            self.flops(in_shape, out))
        return out, [row]


def _numel(shape: tuple) -> int:
    return math.prod(shape)


class Conv2d(Module):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = False):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"conv channels {in_ch}->{out_ch} not divisible by groups={groups}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        fan_in = (in_ch // groups) * kernel * kernel
        self.declare("weight", (out_ch, in_ch // groups, kernel, kernel), "he", fan_in)
        self.has_bias = bias
        if bias:
            self.declare("bias", (out_ch,))

    def forward(self, x):
        b = self.param("bias") if self.has_bias else None
        return L.conv2d(x, self.param("weight"), b, self.stride, self.padding, self.groups)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got {c}")
        return (self.out_ch,
                L.conv_output_extent(h, self.kernel, self.stride, self.padding),
                L.conv_output_extent(w, self.kernel, self.stride, self.padding))

    def flops(self, in_shape, out_shape):
        positions = out_shape[1] * out_shape[2]
        return 2 * positions * self.out_ch * (self.in_ch // self.groups) * self.kernel * self.kernel


class BatchNorm2d(Module):
    kind = "batchnorm"

    def __init__(self, ch: int, momentum: float = L.BN_MOMENTUM, epsilon: float = L.BN_EPSILON):
        super().__init__()
        self.ch, self.momentum, self.epsilon = ch, momentum, epsilon
        self.declare("gamma", (ch,), "ones")
        self.declare("beta", (ch,), "zeros")
        self.declare("running_mean", (ch,), "zeros", trainable=False)
        self.declare("running_var", (ch,), "ones", trainable=False)

    def forward(self, x):
        return L.batchnorm(x, self.param("gamma"), self.param("beta"), self.param("running_mean"),
                           self.param("running_var"), self.training, self.momentum, self.epsilon)

    def out_shape(self, in_shape):
        if in_shape[0] != self.ch:
            raise ShapeError(f"batchnorm expects {self.ch} channels, got {in_shape[0]}")
        return in_shape

    def flops(self, in_shape, out_shape):
        return _numel(out_shape)


class Linear(Module):
    kind = "fc"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.declare("weight", (out_features, in_features), "he", in_features)
        self.declare("bias", (out_features,))

    def forward(self, x):
        return L.fc(x, self.param("weight"), self.param("bias"))

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"fc expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def flops(self, in_shape, out_shape):
        return 2 * self.out_features * self.in_features


class ReLU(Module):
    kind = "relu"

    def forward(self, x):
        return L.relu(x)

    def out_shape(self, in_shape):
        return in_shape

    def flops(self, in_shape, out_shape):
        return _numel(out_shape)


class Flatten(Module):
    kind = "flatten"

    def forward(self, x):
        return L.flatten(x)

    def out_shape(self, in_shape):
        return (_numel(in_shape),)


class GlobalAvgPool(Module):
    kind = "global_avg_pool"

    def forward(self, x):
        return L.global_avg_pool(x)

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def flops(self, in_shape, out_shape):
        return _numel(in_shape)


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *named: tuple[str, Module]):
        super().__init__()
        for name, module in named:
            self._children[name] = module

    def forward(self, x):
        for _, module in self.children():
            x = module(x)
        return x

    def out_shape(self, in_shape):
        for _, module in self.children():
            in_shape = module.out_shape(in_shape)
        return in_shape

    def complexity(self, in_shape, name):
        rows = []
        prefix = f"{name}." if name else ""
        for cname, module in self.children():
            in_shape, sub = module.complexity(in_shape, prefix + cname)
            rows.extend(sub)
        return in_shape, rows
