"""Reverse-mode automatic differentiation over dense float64 arrays.

A small dynamic-graph engine: every operation records its parent nodes and a
closure that maps the upstream gradient to per-parent gradients. Graphs are
rebuilt on every forward pass; `backward` walks the graph once in reverse
topological order and accumulates gradients additively into each node's
`grad` buffer. Buffers persist across passes until cleared with `zero_grad`,
so multi-term losses and repeated parameter uses compose correctly.

A node created by `detach` is a gradient barrier: its values alias the
source, but backward traversal never crosses it, so every ancestor receives
exactly zero gradient from paths through the barrier.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for graph construction and backward errors."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible; the message names both shapes."""


class DomainError(AutodiffError):
    """Input lies outside an op's mathematical domain (log of <= 0, x/0)."""


class GraphError(AutodiffError):
    """Graph misuse, e.g. calling backward on a non-scalar node."""


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A value in the computation graph.

    `values` is a float64 ndarray. `grad` (same shape) accumulates across
    backward passes until `zero_grad`. `barrier` marks a gradient stop.
    """

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        barrier: bool = False,
    ):
        self.values = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self.barrier = barrier
        self.grad: np.ndarray | None = None
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph-building operations ------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(other)

    def __add__(self, other):
        return _binary("add", self, self._coerce(other))

    def __radd__(self, other):
        return _binary("add", self._coerce(other), self)

    def __sub__(self, other):
        return _binary("sub", self, self._coerce(other))

    def __rsub__(self, other):
        return _binary("sub", self._coerce(other), self)

    def __mul__(self, other):
        return _binary("mul", self, self._coerce(other))

    def __rmul__(self, other):
        return _binary("mul", self._coerce(other), self)

    def __truediv__(self, other):
        return _binary("div", self, self._coerce(other))

    def __rtruediv__(self, other):
        return _binary("div", self._coerce(other), self)

    def __neg__(self):
        return self.scale(-1.0)

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def exp(self) -> "Tensor":
        return _unary("exp", self)

    def log(self) -> "Tensor":
        return _unary("log", self)

    def abs(self) -> "Tensor":
        return _unary("abs", self)

    def relu(self) -> "Tensor":
        return _unary("relu", self)

    def scale(self, c: float) -> "Tensor":
        """Multiply by a plain float constant (no graph node for `c`)."""
        c = float(c)
        out = Tensor(self.values * c, requires_grad=self.requires_grad,
                     op="scale", parents=(self,),
                     backward_fn=lambda up: (up * c,))
        return out

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return reduce("mean", self, axis)

    def detach(self) -> "Tensor":
        return detach(self)


def constant(values) -> Tensor:
    """A leaf tensor that never receives gradient."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """A leaf tensor that accumulates gradient."""
    return Tensor(values, requires_grad=True)


# -- elementwise ops ----------------------------------------------------

def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{kind}: incompatible shapes {a.shape} and {b.shape}"
        ) from None


def _binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, kind)
    av, bv = a.values, b.values
    if kind == "add":
        out_v = av + bv
        grads = lambda up: (_unbroadcast(up, av.shape), _unbroadcast(up, bv.shape))
    elif kind == "sub":
        out_v = av - bv
        grads = lambda up: (_unbroadcast(up, av.shape), _unbroadcast(-up, bv.shape))
    elif kind == "mul":
        out_v = av * bv
        grads = lambda up: (
            _unbroadcast(up * bv, av.shape),
            _unbroadcast(up * av, bv.shape),
        )
    elif kind == "div":
        if np.any(bv == 0.0):
            raise DomainError("div: divisor contains zero")
        out_v = av / bv
        grads = lambda up: (
            _unbroadcast(up / bv, av.shape),
            _unbroadcast(-up * av / (bv * bv), bv.shape),
        )
    else:
        raise AutodiffError(f"unknown binary op kind {kind!r}")
    return Tensor(out_v, requires_grad=a.requires_grad or b.requires_grad,
                  op=kind, parents=(a, b), backward_fn=grads)


def _unary(kind: str, a: Tensor) -> Tensor:
    av = a.values
    if kind == "exp":
        out_v = np.exp(av)
        grads = lambda up: (up * out_v,)
    elif kind == "log":
        if np.any(av <= 0.0):
            raise DomainError("log: input contains non-positive entries")
        out_v = np.log(av)
        grads = lambda up: (up / av,)
    elif kind == "abs":
        out_v = np.abs(av)
        # subgradient at 0 fixed to 0 for determinism
        sign = np.sign(av)
        grads = lambda up: (up * sign,)
    elif kind == "relu":
        out_v = np.maximum(av, 0.0)
        mask = (av > 0.0).astype(np.float64)
        grads = lambda up: (up * mask,)
    else:
        raise AutodiffError(f"unknown unary op kind {kind!r}")
    return Tensor(out_v, requires_grad=a.requires_grad,
                  op=kind, parents=(a,), backward_fn=grads)


_BINARY_KINDS = ("add", "sub", "mul", "div")
_UNARY_KINDS = ("exp", "log", "abs", "relu")


def elementwise(kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Apply a registered elementwise op by name.

    Binary kinds (add/sub/mul/div) require `b`; `scale` takes a plain float
    `b`; unary kinds (exp/log/abs/relu) take only `a`.
    """
    if kind in _BINARY_KINDS:
        if b is None:
            raise AutodiffError(f"{kind} requires a second operand")
        return _binary(kind, a, a._coerce(b))
    if kind == "scale":
        if not isinstance(b, (int, float)):
            raise AutodiffError("scale requires a plain float factor")
        return a.scale(b)
    if kind in _UNARY_KINDS:
        if b is not None:
            raise AutodiffError(f"{kind} is unary")
        return _unary(kind, a)
    raise AutodiffError(f"unknown elementwise kind {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(
            f"matmul: expects rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} vs {b.shape}"
        )
    av, bv = a.values, b.values
    out_v = av @ bv
    grads = lambda up: (up @ bv.T, av.T @ up)
    return Tensor(out_v, requires_grad=a.requires_grad or b.requires_grad,
                  op="matmul", parents=(a, b), backward_fn=grads)


def reduce(kind: str, a: Tensor, axis: int | None = None) -> Tensor:
    """Sum or mean over all entries or over one axis."""
    if kind not in ("sum", "mean"):
        raise AutodiffError(f"unknown reduce kind {kind!r}")
    av = a.values
    if axis is not None:
        if not -av.ndim <= axis < av.ndim:
            raise ShapeError(f"{kind}: axis {axis} invalid for shape {a.shape}")
        axis = axis % av.ndim
        count = av.shape[axis]
    else:
        count = av.size

    if kind == "sum":
        out_v = av.sum(axis=axis)
        scale = 1.0
    else:
        out_v = av.mean(axis=axis)
        scale = 1.0 / count

    def grads(up):
        if axis is None:
            g = np.broadcast_to(up, av.shape).astype(np.float64)
        else:
            g = np.broadcast_to(np.expand_dims(up, axis), av.shape).astype(np.float64)
        return (g * scale,)

    return Tensor(out_v, requires_grad=a.requires_grad,
                  op=kind, parents=(a,), backward_fn=grads)


def detach(a: Tensor) -> Tensor:
    """Gradient barrier: same values, zero gradient to all ancestors."""
    return Tensor(a.values, requires_grad=False, op="detach",
                  parents=(a,), backward_fn=None, barrier=True)


# -- backward pass ------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-topological node order; never descends past a barrier."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if not node.barrier:
            for parent in node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `grad` for every reachable node.

    The flow of the current pass is kept local, then added into each node's
    `grad` buffer: repeated backward calls therefore sum, and barrier nodes
    contribute nothing to their ancestors.
    """
    if loss.values.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {loss.shape}")

    order = _topo_order(loss)
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}

    for node in reversed(order):
        up = flow.get(id(node))
        if up is None:
            continue
        if node.barrier or node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(up)
        for parent, g in zip(node.parents, parent_grads):
            if g is None:
                continue
            key = id(parent)
            if key in flow:
                flow[key] = flow[key] + g
            else:
                flow[key] = np.array(g, dtype=np.float64, copy=True)

    for node in order:
        g = flow.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def finite_difference_grad(
    f: Callable[[], float],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient estimate of `f` w.r.t. each tensor.

    `f` re-evaluates the forward computation from the tensors' current
    values and returns a plain float; each coordinate is perturbed in place.
    """
    if eps <= 0:
        raise AutodiffError("finite_difference_grad: eps must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.values)
        flat_v = p.values.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + eps
            f_plus = f()
            flat_v[i] = orig - eps
            f_minus = f()
            flat_v[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads
