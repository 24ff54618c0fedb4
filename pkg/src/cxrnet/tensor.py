"""Dense tensors with reverse-mode differentiation, plus the seeded generator.

A :class:`Tensor` wraps a row-major numpy array.  Every differentiable op
returns a new tensor that remembers its parents and a closure mapping the
output gradient to parent gradients; :meth:`Tensor.backward` replays those
closures in reverse topological order.  The recorded graph is the gradient
tape: it is built on the fly and released with the output tensor.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional float array that can take part in backpropagation.

    Leaves created with ``requires_grad=True`` receive their gradient in
    ``.grad`` after ``backward``; gradients accumulate until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return cls(data, requires_grad=True, _parents=parents, _backward=backward)
        return cls(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # -- autodiff engine -------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- elementwise arithmetic -----------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) + (-self)

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(k, (slice, int)) or k is Ellipsis for k in parts)

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        out = self.data.reshape(shape)
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),))

    def sum(self) -> "Tensor":
        shape = self.shape
        return Tensor._from_op(np.asarray(self.data.sum()), (self,),
                               lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def tensor(data, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tuple(tensors), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        return g @ y.T, x.T @ g

    return Tensor._from_op(x @ y, (a, b), backward)


# -- deterministic random numbers ---------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The state advances by the golden-ratio increment ``0x9E3779B97F4A7C15``
    and each output is the state passed through the two multiply-xorshift
    rounds of the published algorithm.  Since output ``i`` depends only on
    ``seed + i * gamma``, blocks of draws are produced in vectorised form
    and remain identical to the one-at-a-time sequence.
    """

    def __init__(self, seed: int = 3):
        self.seed = int(seed)
        self.state = self.seed & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise InvalidArgumentError("draw count must be non-negative")
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            states = steps + np.uint64(self.state)
            out = _mix64(states)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform01(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def split(self) -> "Rng":
        """Derive an independent child generator and advance this one."""
        return Rng(int(self.next_u64(1)[0]))

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise InvalidArgumentError(f"all extents must be positive, got {shape}")
    return shape


def rng_uniform(rng: Rng, shape, lo: float = 0.0, hi: float = 1.0, dtype=np.float64) -> Tensor:
    if not lo < hi:
        raise InvalidArgumentError(f"empty interval [{lo}, {hi})")
    shape = _check_shape(shape)
    u = rng.uniform01(math.prod(shape)).reshape(shape)
    vals = lo + (hi - lo) * u
    # lo + span*u can round up to hi for u close to 1
    vals = np.minimum(vals, np.nextafter(hi, lo))
    out = vals.astype(dtype)
    if out.dtype != np.float64:
        out = np.minimum(out, np.nextafter(np.asarray(hi, dtype=dtype), np.asarray(lo, dtype=dtype)))
    return Tensor(out)


def standard_normal(rng: Rng, n: int) -> np.ndarray:
    """Box-Muller: pair k uses uniforms (u1, u2) = draws 2k, 2k+1.

    ``r = sqrt(-2 ln(1 - u1))``, ``theta = 2 pi u2``; the pair yields
    ``r cos(theta)`` then ``r sin(theta)``.  An odd trailing value is dropped.
    """
    pairs = (n + 1) // 2
    u = rng.uniform01(2 * pairs).reshape(pairs, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    z = np.empty((pairs, 2))
    z[:, 0] = r * np.cos(theta)
    z[:, 1] = r * np.sin(theta)
    return z.reshape(-1)[:n]


def he_normal_init(rng: Rng, shape, fan_in: int, dtype=np.float32) -> Tensor:
    if fan_in < 1:
        raise InvalidArgumentError("fan_in must be at least 1")
    shape = _check_shape(shape)
    std = math.sqrt(2.0 / fan_in)
    z = standard_normal(rng, math.prod(shape)).reshape(shape)
    return Tensor((z * std).astype(dtype))


# -- finite-difference gradient check -------------------------------------

def grad_check(f: Callable[..., Tensor], params: Tensor | Iterable[Tensor], eps: float = 1e-5) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` is called as ``f(*params)`` and must return a scalar tensor.  Each
    parameter's ``data`` is perturbed in place and restored afterwards, so
    parameters should be float64 for a meaningful comparison.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f(*params)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()

    def value() -> float:
        with no_grad():
            v = float(f(*params).data)
        if not math.isfinite(v):
            raise NumericError("function value is not finite under perturbation")
        return v

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise InvalidArgumentError("grad_check needs contiguous parameter data")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
