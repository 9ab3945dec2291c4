"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tensors that were
registered with :meth:`Tape.watch`. Calling :meth:`Tape.backward` on a scalar
result walks the tape in reverse insertion order and returns the gradient of
that scalar with respect to each watched leaf. The graph is rebuilt on every
forward pass, which suits training loops that redraw weight noise each step.

Example::

    tape = Tape()
    w = tape.watch(np.ones((1, 2)))
    x = Tensor([[3.0], [4.0]])
    loss = (w @ x).sum()
    grads = tape.backward(loss)   # grads[w] == [[3., 4.]]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ContractError, ShapeError

ACTIVATIONS = ("identity", "relu", "sigmoid", "softplus", "softmax")

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Immutable float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "index", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, tape: Tape | None = None, index: int | None = None,
                 name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tracked})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: neg(self)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | None = None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return tmean(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int | None, ...]
    backward: BackwardFn | None  # None marks a leaf


class Tape:
    """Append-only record of a single forward pass.

    A tape is single-use: :meth:`backward` clears it, after which tensors
    recorded on it can no longer take part in tracked operations.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._leaves: list[Tensor] = []
        self.closed = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, data, name: str | None = None) -> Tensor:
        """Register a leaf (parameter) whose gradient :meth:`backward` reports."""
        self._check_open()
        value = data.data if isinstance(data, Tensor) else data
        t = Tensor(value, self, len(self.nodes), name)
        self.nodes.append(TapeNode("leaf", (), None))
        self._leaves.append(t)
        return t

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Tensor],
               backward: BackwardFn) -> Tensor:
        self._check_open()
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(TapeNode(op, tuple(x.index if x.tape is self else None for x in inputs),
                                   backward))
        return t

    def _check_open(self):
        if self.closed:
            raise ContractError("tape has already been consumed by backward()")

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(leaf) for every watched leaf, then clear the tape."""
        self._check_open()
        if not isinstance(loss, Tensor):
            loss = Tensor(loss)
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not None and loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        if loss.tape is self:
            grads[loss.index] = np.ones(loss.shape)
        for i in range(len(self.nodes) - 1, -1, -1):
            node, g = self.nodes[i], grads[i]
            if g is None or node.backward is None:
                continue
            for j, gi in zip(node.inputs, node.backward(g)):
                if j is None or gi is None:
                    continue
                grads[j] = gi if grads[j] is None else grads[j] + gi

        out = {}
        for leaf in self._leaves:
            g = grads[leaf.index]
            out[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64)
        self.nodes = []
        self._leaves = []
        self.closed = True
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is None:
            continue
        if tape is None:
            tape = x.tape
        elif x.tape is not tape:
            raise ContractError("operands were recorded on different tapes")
    if tape is not None:
        tape._check_open()
    return tape


def _apply(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, inputs, backward)


# -- broadcasting: equal shapes, a scalar operand, or a row-vector bias -----

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    if len(shape) == 1 and g.ndim == 2:
        return np.sum(g, axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _apply("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _apply("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.data, b.data
    return _apply("mul", av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.data, b.data
    out = av / bv
    return _apply("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bv, av.shape),
                             _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.data, b.data
    return _apply("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got shape {a.shape}")
    return _apply("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return _apply("reshape", value, (a,), lambda g: (g.reshape(old),))


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _apply("sum", np.sum(a.data, axis=axis), (a,), backward)


def tmean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) / float(n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _apply("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _apply("log", np.log(av), (a,), lambda g: (g / av,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _apply("square", av * av, (a,), lambda g: (2.0 * av * g,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; the gradient is zero where the floor binds."""
    a = as_tensor(a)
    av = a.data
    return _apply("maximum", np.maximum(av, floor), (a,), lambda g: (g * (av > floor),))


def column(a, j: int) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= j < a.shape[1]:
        raise ShapeError(f"column {j} out of range for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, j] = g
        return (full,)

    return _apply("column", a.data[:, j], (a,), backward)


def pick(a, indices: Sequence[int]) -> Tensor:
    """Select ``a[i, indices[i]]`` for each row ``i``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: {idx.shape[0] if idx.ndim else 0} indices for shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _apply("pick", a.data[rows, idx], (a,), backward)


# -- activations ------------------------------------------------------------

def softplus_np(x: np.ndarray) -> np.ndarray:
    """Overflow-free ``log(1 + exp(x))``."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=1, keepdims=True))
    return z / np.sum(z, axis=1, keepdims=True)


def activation(x, kind: str) -> Tensor:
    """Apply an activation by name. ``softmax`` normalises each row of a matrix."""
    x = as_tensor(x)
    xv = x.data
    if kind == "identity":
        return x
    if kind == "relu":
        mask = xv > 0  # subgradient 0 at the kink
        return _apply("relu", np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        out = expit(xv)
        return _apply("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))
    if kind == "softplus":
        slope = expit(xv)
        return _apply("softplus", softplus_np(xv), (x,), lambda g: (g * slope,))
    if kind == "softmax":
        if x.ndim != 2:
            raise ShapeError(f"softmax needs a rank-2 tensor, got shape {x.shape}")
        out = softmax_np(xv)
        # Jacobian-vector product; the Jacobian itself is never formed
        return _apply("softmax", out, (x,),
                      lambda g: (out * (g - np.sum(g * out, axis=1, keepdims=True)),))
    raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def softplus(x) -> Tensor:
    return activation(x, "softplus")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def relu(x) -> Tensor:
    return activation(x, "relu")
