"""Reverse-mode automatic differentiation over dense 64-bit matrices.

Everything in this package computes on 2-D float64 arrays. A small, fixed
set of primitives (matmul, add, elementwise mul, GeLU, sigmoid, row-wise
softmax, row layer normalization, log, gather-rows, concat-rows, sum, mean)
is recorded on a `Tape`; `grad` replays the recording backwards and returns
gradients for every registered parameter. All reductions use numpy's fixed
evaluation order, so recomputing a forward pass from the same inputs is
bit-identical.

Ops accept a `Node` or a plain array/float for either operand; non-Node
operands are treated as constants and receive no gradient.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Node",
    "Tape",
    "as_matrix",
    "grad",
    "node_grads",
    "matmul",
    "add",
    "mul",
    "gelu",
    "sigmoid",
    "softmax_rows",
    "layer_norm_rows",
    "log",
    "gather_rows",
    "concat_rows",
    "sum_all",
    "mean_all",
    "matmul_flop_counter",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


def as_matrix(x, name: str = "value") -> np.ndarray:
    """Coerce to a finite, C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class Node:
    """One value in the computation graph."""

    __slots__ = ("tape", "value", "_parents", "_backward")

    def __init__(self, tape, value, parents=(), backward=None):
        self.tape = tape
        self.value = value
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Tape:
    """Recording context: ordered op records plus named parameters.

    A tape belongs to one logical execution; it is not shared across
    concurrent trainers. With ``recording=False`` the same ops run
    value-only (no graph is kept), which is the inference fast path.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def param(self, name: str, value: np.ndarray) -> Node:
        """Register a named parameter array (validated at model boundaries,
        not per pass)."""
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        if value.ndim != 2:
            raise ShapeError(f"parameter {name} must be 2-D, got {value.shape}")
        node = Node(self, value)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        if isinstance(value, (int, float)):
            value = np.full((1, 1), float(value))
        elif not (isinstance(value, np.ndarray) and value.ndim == 2):
            value = as_matrix(value, "const")
        return Node(self, value)

    def _emit(self, value, parents, backward) -> Node:
        if not self.recording:
            return Node(self, value)
        node = Node(self, value, parents, backward)
        self.nodes.append(node)
        return node


_SCALARS = (int, float, np.floating, np.integer)


def _split(x):
    """Return (value, node-or-None) for an operand."""
    if isinstance(x, Node):
        return x.value, x
    if isinstance(x, _SCALARS):
        return float(x), None
    return np.asarray(x, dtype=np.float64), None


def _tape_of(*operands) -> Tape:
    for op in operands:
        if isinstance(op, Node):
            return op.tape
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, g.shape[1]):
        return g.sum(axis=0, keepdims=True)
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a_shape, b_shape):
    if b_shape == a_shape or b_shape == (1, a_shape[1]) or b_shape == (1, 1):
        return
    if a_shape == (1, b_shape[1]) or a_shape == (1, 1):
        return
    raise ShapeError(f"shapes {a_shape} and {b_shape} do not broadcast")


# ---------------------------------------------------------------------------
# matmul FLOP instrumentation (used as an independent check on cost models)
# ---------------------------------------------------------------------------

_ACTIVE_COUNTERS: list["matmul_flop_counter"] = []


class matmul_flop_counter:
    """Context manager counting 2*m*k*p for every matmul executed inside."""

    def __init__(self):
        self.total = 0

    def __enter__(self):
        _ACTIVE_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_COUNTERS.remove(self)
        return False


def _count_matmul(m: int, k: int, p: int) -> None:
    if _ACTIVE_COUNTERS:
        flops = 2 * m * k * p
        for counter in _ACTIVE_COUNTERS:
            counter.total += flops


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b, transpose_b: bool = False) -> Node:
    """Matrix product a @ b (or a @ b.T when `transpose_b`)."""
    tape = _tape_of(a, b)
    va, na = _split(a)
    vb, nb = _split(b)
    inner_b = vb.shape[1] if transpose_b else vb.shape[0]
    if va.shape[1] != inner_b:
        raise ShapeError(
            f"matmul mismatch: {va.shape} x {vb.shape}"
            + (" (transposed)" if transpose_b else "")
        )
    out = va @ vb.T if transpose_b else va @ vb
    if _ACTIVE_COUNTERS:
        _count_matmul(out.shape[0], va.shape[1], out.shape[1])
    if not tape.recording:
        return Node(tape, out)

    parents = tuple(n for n in (na, nb) if n is not None)

    def backward(g):
        contribs = []
        if na is not None:
            contribs.append(g @ vb if transpose_b else g @ vb.T)
        if nb is not None:
            contribs.append(g.T @ va if transpose_b else va.T @ g)
        return contribs

    return tape._emit(out, parents, backward)


def add(a, b) -> Node:
    """Elementwise sum; operands may broadcast from (1, m), (1, 1), or scalar."""
    tape = _tape_of(a, b)
    va, na = _split(a)
    vb, nb = _split(b)
    a_scalar = na is None and not isinstance(va, np.ndarray)
    b_scalar = nb is None and not isinstance(vb, np.ndarray)
    if not a_scalar and not b_scalar and va.shape != vb.shape:
        _check_broadcast(va.shape, vb.shape)
    out = va + vb
    if not tape.recording:
        return Node(tape, out)
    parents = tuple(n for n in (na, nb) if n is not None)

    def backward(g):
        contribs = []
        if na is not None:
            contribs.append(g if g.shape == va.shape else _unbroadcast(g, va.shape))
        if nb is not None:
            contribs.append(g if g.shape == vb.shape else _unbroadcast(g, vb.shape))
        return contribs

    return tape._emit(out, parents, backward)


def mul(a, b) -> Node:
    """Elementwise product; broadcasting rules as for `add`."""
    tape = _tape_of(a, b)
    va, na = _split(a)
    vb, nb = _split(b)
    a_scalar = na is None and not isinstance(va, np.ndarray)
    b_scalar = nb is None and not isinstance(vb, np.ndarray)
    if not a_scalar and not b_scalar and va.shape != vb.shape:
        _check_broadcast(va.shape, vb.shape)
    out = va * vb
    if not tape.recording:
        return Node(tape, out)
    parents = tuple(n for n in (na, nb) if n is not None)

    def backward(g):
        contribs = []
        if na is not None:
            d = g * vb
            contribs.append(d if d.shape == va.shape else _unbroadcast(d, va.shape))
        if nb is not None:
            d = g * va
            contribs.append(d if d.shape == vb.shape else _unbroadcast(d, vb.shape))
        return contribs

    return tape._emit(out, parents, backward)


def gelu(a: Node) -> Node:
    """Gaussian error linear unit, exact erf form."""
    va = a.value
    cdf = 0.5 * (1.0 + erf(va / _SQRT2))
    out = va * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * va * va)
        return [g * (cdf + va * pdf)]

    return a.tape._emit(out, (a,), backward)


def sigmoid(a: Node) -> Node:
    va = a.value
    z = np.exp(-np.abs(va))
    out = np.where(va >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        return [g * out * (1.0 - out)]

    return a.tape._emit(out, (a,), backward)


def softmax_rows(a: Node) -> Node:
    """Row-wise softmax with max subtraction for stability."""
    va = a.value
    shifted = va - va.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return [out * (g - dot)]

    return a.tape._emit(out, (a,), backward)


def layer_norm_rows(a: Node, eps: float = 1e-12) -> Node:
    """Normalize each row to mean 0, variance 1 (no scale/shift)."""
    va = a.value
    mu = va.mean(axis=1, keepdims=True)
    xc = va - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g):
        g_mean = g.mean(axis=1, keepdims=True)
        gy_mean = (g * out).mean(axis=1, keepdims=True)
        return [inv * (g - g_mean - out * gy_mean)]

    return a.tape._emit(out, (a,), backward)


def log(a: Node) -> Node:
    va = a.value
    if (va <= 0.0).any():
        raise ValueError("log requires strictly positive entries")
    out = np.log(va)

    def backward(g):
        return [g / va]

    return a.tape._emit(out, (a,), backward)


def gather_rows(a: Node, indices) -> Node:
    """Select rows by index; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("row indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise IndexError("row index out of range")
    out = a.value[idx]

    def backward(g):
        da = np.zeros_like(a.value)
        np.add.at(da, idx, g)
        return [da]

    return a.tape._emit(out, (a,), backward)


def concat_rows(parts: Sequence[Node]) -> Node:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != cols:
            raise ShapeError("concat_rows parts must share column count")
    out = np.concatenate([p.value for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])

    def backward(g):
        return [g[offsets[i] : offsets[i + 1]] for i in range(len(parts))]

    return parts[0].tape._emit(out, tuple(parts), backward)


def sum_all(a: Node) -> Node:
    out = np.array([[a.value.sum()]])

    def backward(g):
        return [np.full(a.value.shape, g[0, 0])]

    return a.tape._emit(out, (a,), backward)


def mean_all(a: Node) -> Node:
    out = np.array([[a.value.mean()]])

    def backward(g):
        return [np.full(a.value.shape, g[0, 0] / a.value.size)]

    return a.tape._emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _backprop(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    if not isinstance(loss, Node):
        raise TypeError("loss must be a Node")
    if loss.value.shape != (1, 1):
        raise ValueError(f"loss must be scalar (1x1), got shape {loss.value.shape}")
    if not tape.recording:
        raise ValueError("cannot differentiate through a non-recording tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, contrib in zip(node._parents, node._backward(g)):
            key = id(parent)
            existing = grads.get(key)
            grads[key] = contrib if existing is None else existing + contrib
    return grads


def grad(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss for every registered parameter.

    Parameters the loss does not depend on receive zero gradients.
    """
    grads = _backprop(tape, loss)
    return {
        name: grads.get(id(node), np.zeros_like(node.value))
        for name, node in tape.params.items()
    }


def node_grads(tape: Tape, loss: Node, nodes: Iterable[Node]) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to arbitrary graph nodes."""
    grads = _backprop(tape, loss)
    return [grads.get(id(n), np.zeros_like(n.value)) for n in nodes]
