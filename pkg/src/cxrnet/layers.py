"""Differentiable layer primitives operating on :class:`~cxrnet.tensor.Tensor`.

Images are laid out ``n x c x h x w``.  Convolution follows the
cross-correlation convention (no kernel flip) with symmetric zero padding.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ShapeError
from .tensor import Tensor, matmul

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out <= 0:
        raise ShapeError(f"non-positive output extent for input {size}, kernel {kernel}, "
                         f"stride {stride}, padding {padding}")
    return out


def _im2col(xp: np.ndarray, groups: int, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather patches as ``groups x (cin_g*kh*kw) x (n*oh*ow)``."""
    n, c = xp.shape[:2]
    cg = c // groups
    if kh == 1 and kw == 1:
        patches = xp[:, :, ::stride, ::stride][:, :, :oh, :ow]
        cols = patches.reshape(n, groups, cg, oh * ow).transpose(1, 2, 0, 3)
        return np.ascontiguousarray(cols).reshape(groups, cg, n * oh * ow)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, groups, cg, oh, ow, kh, kw).transpose(1, 2, 5, 6, 0, 3, 4)
    return np.ascontiguousarray(win).reshape(groups, cg * kh * kw, n * oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D convolution; ``weight`` is ``out x in/groups x kh x kw``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise InvalidArgumentError("stride >= 1, padding >= 0 and groups >= 1 are required")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups:
        raise ShapeError(f"channels in={c}, out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg * groups} input channels, input has {c}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    og = o // groups
    p = padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, groups, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(groups, og, cg * kh * kw)
    out = np.matmul(wmat, cols).reshape(groups, og, n, oh, ow)
    out = out.transpose(2, 0, 1, 3, 4).reshape(n, o, oh, ow)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = np.ascontiguousarray(g.reshape(n, groups, og, oh * ow).transpose(1, 2, 0, 3))
        gmat = gmat.reshape(groups, og, n * oh * ow)
        dw = np.matmul(gmat, cols.transpose(0, 2, 1)).reshape(weight.shape)
        dcols = np.matmul(wmat.transpose(0, 2, 1), gmat)
        dcols = dcols.reshape(groups, cg, kh, kw, n, oh, ow).transpose(4, 0, 1, 2, 3, 5, 6)
        dcols = dcols.reshape(n, c, kh, kw, oh, ow)
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                    j:j + stride * (ow - 1) + 1:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
              training: bool, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON) -> Tensor:
    """Per-channel batch normalisation of an ``n x c x h x w`` tensor.

    In training mode the batch statistics (biased variance) normalise the
    input and the running buffers are replaced by
    ``momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm expects a 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters do not match {c} channels")
    if epsilon <= 0:
        raise InvalidArgumentError("epsilon must be positive")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    bshape = (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data = (momentum * running_mean.data + (1 - momentum) * mean).astype(running_mean.dtype)
        running_var.data = (momentum * running_var.data + (1 - momentum) * var).astype(running_var.dtype)
    else:
        mean = running_mean.data
        var = running_var.data
    inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to(g.reshape(n, c, 1, 1) * scale, x.shape).astype(x.dtype),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1 - s),))


def tanh_act(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1 - t * t),))


def fc(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer ``x @ weight.T + bias``; weight is ``out x in``."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fc expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc input width {x.shape[1]} does not match weight {weight.shape}")
    wt = weight.data
    xd = x.data
    out = xd @ wt.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"fc bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        return g @ wt, g.T @ xd, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_one_hot(labels: np.ndarray) -> None:
    ones = labels == 1
    zeros = labels == 0
    bad = ~((ones | zeros).all(axis=1) & (ones.sum(axis=1) == 1))
    if bad.any():
        raise InvalidArgumentError(f"label row {int(np.argmax(bad))} is not one-hot")


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean categorical cross-entropy and the softmax probabilities."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if logits.ndim != 2 or y.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and labels {y.shape} must be equal n x k")
    if logits.shape[1] < 2:
        raise InvalidArgumentError("softmax_xent needs at least two classes")
    _check_one_hot(y)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    loss = -(log_probs * y).sum() / n
    y_cast = y.astype(logits.dtype)

    def backward(g):
        return (g * (probs - y_cast) / n,)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward), probs
