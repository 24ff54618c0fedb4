"""RegNet width schedule and the bottleneck backbone built from it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidArgumentError, ShapeError
from .modules import BatchNorm2d, ComplexityRow, Conv2d, Module, ReLU, Sequential
from .layers import relu
from .tensor import Tensor


@dataclass(frozen=True)
class RegNetSpec:
    """Design-space parameters: depth, initial width, slope, width multiplier,
    bottleneck ratio, group width, plus the stem's channel count."""

    d: int
    w0: int
    wa: float
    wm: float
    b: int = 1
    g: int = 8
    stem_width: int = 32

    def validate(self) -> None:
        if self.wm <= 1:
            raise InvalidArgumentError(f"width multiplier must exceed 1, got {self.wm}")
        if self.d < 1 or self.b < 1 or self.g < 1 or self.wa < 0:
            raise InvalidArgumentError("need d >= 1, b >= 1, g >= 1 and wa >= 0")
        if self.w0 < self.g or self.w0 % self.g:
            raise InvalidArgumentError(f"w0={self.w0} must be a positive multiple of g={self.g}")
        if self.stem_width < 1:
            raise InvalidArgumentError("stem_width must be positive")


# RegNetX-200MF from the RegNet design-space reference models
REGNET_X002 = RegNetSpec(d=13, w0=24, wa=36.44, wm=2.49, b=1, g=8, stem_width=32)


@dataclass(frozen=True)
class Stage:
    width: int
    depth: int
    stride: int = 2


@dataclass(frozen=True)
class WidthPlan:
    u: list[float]
    s: list[float]
    w: list[int]
    stages: list[Stage] = field(default_factory=list)

    @property
    def stage_widths(self) -> list[int]:
        return [st.width for st in self.stages]

    @property
    def stage_depths(self) -> list[int]:
        return [st.depth for st in self.stages]

    def stage_ids(self) -> list[int]:
        ids = []
        for k, st in enumerate(self.stages, start=1):
            ids.extend([k] * st.depth)
        return ids


def _round_to_multiple(value: float, q: int) -> int:
    return int(round(value / q)) * q


def generate_widths(spec: RegNetSpec) -> WidthPlan:
    """Linear widths ``u_j = w0 + wa*j`` quantised to ``w0 * wm**round(s_j)``.

    ``s_j = log(u_j / w0) / log(wm)``.  Quantised widths are snapped to a
    multiple of ``g`` (after dividing out the bottleneck ratio ``b``), so
    every grouped convolution sees whole groups.  Rounding is half-to-even.
    """
    spec.validate()
    u = [spec.w0 + spec.wa * j for j in range(spec.d)]
    s = [math.log(uj / spec.w0) / math.log(spec.wm) for uj in u]
    w = []
    for sj in s:
        width = spec.w0 * spec.wm ** round(sj)
        inner = max(spec.g, _round_to_multiple(width / spec.b, spec.g))
        w.append(inner * spec.b)
    stages: list[Stage] = []
    for wj in w:
        if stages and stages[-1].width == wj:
            stages[-1] = Stage(wj, stages[-1].depth + 1)
        else:
            stages.append(Stage(wj, 1))
    return WidthPlan(u, s, w, stages)


class Bottleneck(Module):
    """1x1 reduce, 3x3 grouped conv, 1x1 expand, each followed by batchnorm,
    with a residual connection and a final relu.  The skip path carries a
    strided 1x1 projection whenever the shape changes."""

    kind = "bottleneck"

    def __init__(self, w_in: int, w_out: int, stride: int, b: int = 1, g: int = 8):
        super().__init__()
        w_b = w_out // b
        if w_b % g:
            raise ShapeError(f"bottleneck width {w_b} is not a multiple of group width {g}")
        self.w_in, self.w_out, self.stride = w_in, w_out, stride
        self.conv_reduce = Conv2d(w_in, w_b, 1)
        self.bn_reduce = BatchNorm2d(w_b)
        self.conv_group = Conv2d(w_b, w_b, 3, stride=stride, padding=1, groups=w_b // g)
        self.bn_group = BatchNorm2d(w_b)
        self.conv_expand = Conv2d(w_b, w_out, 1)
        self.bn_expand = BatchNorm2d(w_out)
        self.has_projection = w_in != w_out or stride != 1
        if self.has_projection:
            self.proj = Conv2d(w_in, w_out, 1, stride=stride)
            self.bn_proj = BatchNorm2d(w_out)

    def forward(self, x: Tensor) -> Tensor:
        return bottleneck_forward(x, self)

    def _main_modules(self):
        return [self.conv_reduce, self.bn_reduce, ReLU(), self.conv_group, self.bn_group, ReLU(),
                self.conv_expand, self.bn_expand]

    def out_shape(self, in_shape):
        for m in self._main_modules():
            in_shape = m.out_shape(in_shape)
        return in_shape

    def complexity(self, in_shape, name):
        rows: list[ComplexityRow] = []
        shape = in_shape
        for cname, module in self.children():
            if cname in ("proj", "bn_proj"):
                continue
            shape, sub = module.complexity(shape, f"{name}.{cname}")
            rows.extend(sub)
            if cname in ("bn_reduce", "bn_group"):
                rows.append(ComplexityRow(f"{name}.{cname}_relu", "relu", shape, 0, 0,
                                          math.prod(shape)))
        if self.has_projection:
            skip = in_shape
            for cname in ("proj", "bn_proj"):
                skip, sub = self._children[cname].complexity(skip, f"{name}.{cname}")
                rows.extend(sub)
            if skip != shape:
                raise ShapeError(f"{name}: skip path {skip} and main path {shape} disagree")
        elif in_shape != shape:
            raise ShapeError(f"{name}: identity skip {in_shape} and main path {shape} disagree")
        rows.append(ComplexityRow(f"{name}.add_relu", "residual", shape, 0, 0, 2 * math.prod(shape)))
        return shape, rows


def bottleneck_forward(x: Tensor, block: Bottleneck) -> Tensor:
    y = relu(block.bn_reduce(block.conv_reduce(x)))
    y = relu(block.bn_group(block.conv_group(y)))
    y = block.bn_expand(block.conv_expand(y))
    skip = block.bn_proj(block.proj(x)) if block.has_projection else x
    return relu(skip + y)


def build_backbone(spec: RegNetSpec = REGNET_X002, in_channels: int = 3) -> Sequential:
    """Stem (3x3 stride-2 conv, batchnorm, relu) followed by one stage per
    distinct width; each stage opens with a stride-2 block."""
    plan = generate_widths(spec)
    stem = Sequential(("conv", Conv2d(in_channels, spec.stem_width, 3, stride=2, padding=1)),
                      ("bn", BatchNorm2d(spec.stem_width)),
                      ("relu", ReLU()))
    named = [("stem", stem)]
    w_in = spec.stem_width
    for k, st in enumerate(plan.stages, start=1):
        blocks = []
        for i in range(st.depth):
            stride = st.stride if i == 0 else 1
            blocks.append((f"block{i + 1}", Bottleneck(w_in, st.width, stride, spec.b, spec.g)))
            w_in = st.width
        named.append((f"stage{k}", Sequential(*blocks)))
    backbone = Sequential(*named)
    backbone.out_channels = w_in
    backbone.plan = plan
    return backbone
