"""Small reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops needed by an MLP velocity field, Gaussian
log-densities and the clipped policy objective are provided. Every op
returns a new :class:`Tensor` that remembers its parents and a closure
propagating the upstream gradient; :func:`backward` walks the graph in
reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_DEBUG = False


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


def set_debug(flag: bool) -> None:
    """Toggle the finite-value assertion run after every op."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop.

    Leaves created with ``requires_grad=True`` accumulate gradients into
    ``.grad``; callers zero them between updates.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite output from op '{op}'")
    tracked = tuple(parents)
    if any(p.requires_grad or p._parents for p in tracked):
        out._parents = tracked
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (leading axes and size-1 axes)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (..., n_in) and ``W`` of (n_in, n_out).

    The forward product goes through ``einsum`` rather than BLAS so a row's
    result never depends on how many rows share the call; replaying a single
    trajectory must reproduce the batched rollout bit for bit.
    """
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"affine: shape mismatch {x.shape} x {W.shape}")
    if b.shape != (W.shape[1],):
        raise ValueError(f"affine: bias shape {b.shape} does not match {W.shape[1]}")
    out = np.einsum("...k,kn->...n", x.data, W.data) + b.data

    def backward_fn(g):
        gx = g @ W.data.T
        x2 = x.data.reshape(-1, W.shape[0])
        g2 = g.reshape(-1, W.shape[1])
        return gx, x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, W, b), backward_fn, "affine")


def activation(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "tanh":
        y = np.tanh(x.data)
        return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-x.data))
        y = x.data * s
        return _make(y, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),), "silu")
    raise ValueError(f"unknown activation '{kind}'")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis), (x,), backward_fn, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward_fn, "concat")


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward_fn, "index")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever clamping is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
        "minimum",
    )


def gaussian_log_density(x, mean_, std) -> Tensor:
    """Sum over the last axis of log N(x_i; mean_i, std^2).

    Differentiable with respect to both ``x`` and ``mean_``. A 1-D input
    yields a scalar; a (B, d) input yields one value per row, and ``std`` may
    then be a scalar or one value per row.
    """
    std = np.asarray(std, dtype=np.float64)
    if not np.all(std > 0) or not np.all(np.isfinite(std)):
        raise ValueError(f"std must be positive and finite, got {std}")
    x, mean_ = as_tensor(x), as_tensor(mean_)
    if x.shape != mean_.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {mean_.shape}")
    d = x.shape[-1] if x.data.ndim else 1
    z = sub(x, mean_)
    quad = sum(square(z), axis=-1) if x.data.ndim else square(z)
    var = std * std
    const = -0.5 * d * np.log(2.0 * np.pi * var)
    return add(mul(quad, -0.5 / var), const)


# ------------------------------------------------------------- graph


@dataclass
class Node:
    op: str
    tensor: Tensor
    inputs: tuple[int, ...]


@dataclass
class CompGraph:
    """Topologically ordered view of everything reachable from a root."""

    nodes: list[Node] = field(default_factory=list)
    order: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_root(cls, root: Tensor) -> "CompGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        graph = cls()
        for i, t in enumerate(order):
            graph.order[id(t)] = i
        for t in order:
            graph.nodes.append(Node(t.op, t, tuple(graph.order[id(p)] for p in t._parents)))
        return graph

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n.tensor for n in self.nodes if n.tensor.is_leaf and n.tensor.requires_grad]


def backward(root: Tensor, graph: CompGraph | None = None) -> CompGraph:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    graph = graph or CompGraph.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.is_leaf:
            if t.requires_grad:
                t.grad += g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if not (parent.requires_grad or parent._parents):
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return graph
