"""Convolutional LSTM layer and squeeze-and-excitation channel attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import InvalidArgumentError, ShapeError
from .modules import ComplexityRow, Linear, Module
from .tensor import Tensor, concat

GATES = ("i", "f", "c", "o")


@dataclass(frozen=True)
class ConvLSTMState:
    h: Tensor
    c: Tensor


class ConvLSTM(Module):
    """Gated convolutional recurrence without peephole terms.

    Each gate ``q`` owns an input kernel ``wx_q``, a hidden kernel ``wh_q``
    and a bias ``b_q``.  The forget bias starts at +1.
    """

    kind = "convlstm"

    def __init__(self, in_ch: int, hidden: int = 512, kernel: int = 1):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise InvalidArgumentError("ConvLSTM kernel size must be odd")
        self.in_ch, self.hidden, self.kernel = in_ch, hidden, kernel
        self.padding = (kernel - 1) // 2
        for q in GATES:
            self.declare(f"wx_{q}", (hidden, in_ch, kernel, kernel), "he", in_ch * kernel * kernel)
            self.declare(f"wh_{q}", (hidden, hidden, kernel, kernel), "he", hidden * kernel * kernel)
            self.declare(f"b_{q}", (hidden,), "const", value=1.0 if q == "f" else 0.0)

    def zero_state(self, x: Tensor) -> ConvLSTMState:
        n, _, h, w = x.shape
        zeros = np.zeros((n, self.hidden, h, w), dtype=x.dtype)
        return ConvLSTMState(Tensor(zeros), Tensor(zeros.copy()))

    def forward(self, x: Tensor) -> Tensor:
        return convlstm_forward([x], self)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"ConvLSTM expects {self.in_ch} channels, got {c}")
        return (self.hidden, h, w)

    def flops(self, in_shape, out_shape):
        # gate convolutions over the stacked [x, h] input, then 9 elementwise
        # ops per hidden unit: 4 activations, f*c, i*g, add, tanh(c), o*tanh(c)
        positions = out_shape[1] * out_shape[2]
        k2 = self.kernel * self.kernel
        macs = positions * 4 * self.hidden * (self.in_ch + self.hidden) * k2
        return 2 * macs + 9 * self.hidden * positions


def convlstm_step(x: Tensor, state: ConvLSTMState, p: ConvLSTM) -> ConvLSTMState:
    if x.ndim != 4 or x.shape[1] != p.in_ch:
        raise ShapeError(f"ConvLSTM input {x.shape} does not have {p.in_ch} channels")
    if state.h.shape != state.c.shape or state.h.shape != (x.shape[0], p.hidden) + x.shape[2:]:
        raise ShapeError(f"ConvLSTM state {state.h.shape} does not match input {x.shape}")
    hd = p.hidden
    wx = concat([p.param(f"wx_{q}") for q in GATES], axis=0)
    wh = concat([p.param(f"wh_{q}") for q in GATES], axis=0)
    bias = concat([p.param(f"b_{q}") for q in GATES], axis=0)
    z = L.conv2d(x, wx, bias, padding=p.padding) + L.conv2d(state.h, wh, padding=p.padding)
    i = L.sigmoid(z[:, 0:hd])
    f = L.sigmoid(z[:, hd:2 * hd])
    g = L.tanh_act(z[:, 2 * hd:3 * hd])
    o = L.sigmoid(z[:, 3 * hd:4 * hd])
    c = f * state.c + i * g
    h = o * L.tanh_act(c)
    return ConvLSTMState(h, c)


def convlstm_forward(seq: Sequence[Tensor], p: ConvLSTM) -> Tensor:
    """Run the cell over ``seq`` from a zero state and return the last hidden map."""
    if len(seq) == 0:
        raise InvalidArgumentError("ConvLSTM needs a non-empty sequence")
    state = p.zero_state(seq[0])
    for x in seq:
        state = convlstm_step(x, state, p)
    return state.h


class SqueezeExcite(Module):
    kind = "se"

    def __init__(self, ch: int, r: int = 16):
        super().__init__()
        if r < 1 or ch % r:
            raise InvalidArgumentError(f"channels {ch} not divisible by reduction ratio {r}")
        self.ch, self.r = ch, r
        self.reduce = Linear(ch, ch // r)
        self.expand = Linear(ch // r, ch)

    def forward(self, x: Tensor) -> Tensor:
        return se_forward(x, self)

    def out_shape(self, in_shape):
        if in_shape[0] != self.ch:
            raise ShapeError(f"SE expects {self.ch} channels, got {in_shape[0]}")
        return in_shape

    def flops(self, in_shape, out_shape):
        cr = self.ch // self.r
        spatial = math.prod(in_shape)
        # squeeze, two dense maps, relu, sigmoid, channel rescale
        return spatial + 2 * self.ch * cr + cr + 2 * cr * self.ch + self.ch + spatial

    def complexity(self, in_shape, name):
        out = self.out_shape(in_shape)
        return out, [ComplexityRow(name, self.kind, out, self.param_count(), self.trainable_count(),
                                   self.flops(in_shape, out))]


def se_channel_weights(x: Tensor, p: SqueezeExcite) -> Tensor:
    z = L.global_avg_pool(x)
    return L.sigmoid(p.expand(L.relu(p.reduce(z))))


def se_forward(x: Tensor, p: SqueezeExcite) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.ch:
        raise InvalidArgumentError(f"SE block expects {p.ch} channels, got input {x.shape}")
    a = se_channel_weights(x, p)
    return x * a.reshape(x.shape[0], p.ch, 1, 1)
