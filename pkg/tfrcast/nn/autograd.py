"""
Reverse-mode gradients over a fixed, unrolled computation.

Every primitive builds a new ``Tensor`` holding its forward value and a closure
mapping the output gradient to one gradient per parent. ``Tensor.backward``
replays the closures in reverse creation order, which is a valid topological
order because a node is always created after its parents. All values are
64-bit floats.
"""

import itertools
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class Tensor:
    """A value in the computation plus what is needed to backpropagate into it."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], Sequence[np.ndarray]]] = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # Constant subgraphs keep no history
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self._id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None):
        """
        Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Args:
            grad: Upstream gradient; defaults to ones (self is usually a scalar loss).
        """
        if not self.requires_grad:
            return
        if grad is None:
            grad = np.ones_like(self.value)

        nodes: List[Tensor] = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda n: n._id, reverse=True)

        self.grad = grad.copy() if self.grad is None else self.grad + grad
        for node in nodes:
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, pgrad in zip(node._parents, parent_grads):
                if not parent.requires_grad or pgrad is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pgrad, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pgrad
            # Interior gradients are not needed once pushed to the parents
            if node._parents:
                node.grad = None


def constant(value) -> Tensor:
    """Wrap an array that gradients never flow into."""
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    """Wrap a trainable array as a gradient-collecting leaf."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, parents=(a, b), backward=backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.value + b.value, parents=(a, b), backward=backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return Tensor(a.value - b.value, parents=(a, b), backward=backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "hadamard")
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Tensor(av * bv, parents=(a, b), backward=backward)


def one_minus(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return Tensor(1.0 - a.value, parents=(a,), backward=backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so large |x| never overflows exp
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, parents=(a,), backward=backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, parents=(a,), backward=backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def backward(g):
        return (g * factor,)

    return Tensor(a.value * factor, parents=(a,), backward=backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; the backward pass splits the gradient back."""
    values = [t.value for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}")
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return Tensor(out, parents=tuple(tensors), backward=backward)


def column(a: Tensor, index: int) -> Tensor:
    """Select one column of a 2-D tensor, keeping it 2-D (rows x 1)."""
    rows, cols = a.shape

    def backward(g):
        full = np.zeros((rows, cols))
        full[:, index] = g[:, 0]
        return (full,)

    return Tensor(a.value[:, index : index + 1], parents=(a,), backward=backward)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(table.value[idx], parents=(table,), backward=backward)


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(np.sum(a.value), parents=(a,), backward=backward)


def pinball_sum(pred: Tensor, target: np.ndarray, levels: np.ndarray) -> Tensor:
    """
    Summed pinball loss of a (rows x Q) prediction against per-row targets.

    Args:
        pred: Predicted quantiles, one column per level.
        target: Observed values, shape (rows,) or (rows, 1).
        levels: Quantile levels, shape (Q,).

    Returns:
        0-d tensor with the sum over rows and levels.
    """
    y = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    tau = np.asarray(levels, dtype=np.float64).reshape(1, -1)
    if pred.shape != (y.shape[0], tau.shape[1]):
        raise ShapeError(
            f"pinball_sum: prediction {pred.shape} vs target {y.shape[0]} x {tau.shape[1]}"
        )
    diff = y - pred.value
    loss = np.maximum(tau * diff, (tau - 1.0) * diff)
    # Subgradient at diff == 0 follows the over-prediction branch
    slope = np.where(diff > 0, -tau, 1.0 - tau)

    def backward(g):
        return (g * slope,)

    return Tensor(np.sum(loss), parents=(pred,), backward=backward)
