#!/usr/bin/env python3
"""
Dense Tensor Engine with Reverse-Mode Differentiation

Every value flowing through the model graph is a ``Tensor``: a numpy array
plus an optional gradient slot. Operations record their parents and a
vector-Jacobian closure; ``Tensor.backward`` walks the recorded graph once in
reverse topological order.

Shapes must match exactly. The only broadcasts are ``bias_add`` and the
explicit ``expand_rows``.
"""

import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .base import NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}

_GELU_C = math.sqrt(2.0 / math.pi)

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _mac_counters() -> list:
    counters = getattr(_local, "mac_counters", None)
    if counters is None:
        counters = []
        _local.mac_counters = counters
    return counters


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class MacCounter:
    """Accumulates multiply-accumulate operations performed by ``matmul``."""

    def __init__(self) -> None:
        self.macs = 0
        self.calls = 0

    def __repr__(self) -> str:
        return f"MacCounter(macs={self.macs}, calls={self.calls})"


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count matmul MACs on the current thread; counters nest."""
    counter = MacCounter()
    counters = _mac_counters()
    counters.append(counter)
    try:
        yield counter
    finally:
        counters.pop()


def _record_macs(n: int) -> None:
    for counter in _mac_counters():
        counter.macs += n
        counter.calls += 1


class Tensor:
    """
    Dense n-dimensional array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` receive ``grad`` after
    ``backward``. Values are never mutated by operations; only optimizers
    update ``data`` in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float64
        array = np.array(data, dtype=dtype, copy=True, order="C")
        if not np.all(np.isfinite(array)):
            raise NumericalError(f"Tensor {name or ''} created with non-finite values")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def _topological_order(self) -> List["Tensor"]:
        """Post-order over the recorded graph: parents precede children."""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate gradients of this tensor into every reachable leaf.

        Args:
            grad: Seed gradient; required unless this tensor is a scalar.

        Raises:
            ShapeError: If no seed is given for a non-scalar output or the
                seed shape differs from the output shape.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        elif grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} does not match {self.shape}")

        pending = {id(self): grad}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op output, recording the graph edge when any parent needs grad."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs_grad
    out._parents = tuple(parents) if needs_grad else ()
    out._backward = backward if needs_grad else None
    return out


def constant(data, dtype=None) -> Tensor:
    """A tensor that never requires grad."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- Elementwise ---

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result(a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python scalar."""
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _result(a.data + value, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    a_data = a.data
    return _result(a_data * a_data, (a,), lambda g: (2.0 * g * a_data,), "square")


# --- Linear algebra and layout ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a [m, k] and b [k, n].

    Raises:
        ShapeError: If either operand is not 2-D or the inner extents differ.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _record_macs(m * k * n)
    a_data, b_data = a.data, b.data

    def backward(g):
        return g @ b_data.T, a_data.T @ g

    return _result(a_data @ b_data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _result(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    source_shape = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(source_shape),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inverse),), "permute")


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis."""
    if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias_add: bias {bias.shape} does not match {x.shape}")
    width = bias.shape[0]
    return _result(x.data + bias.data, (x, bias),
                   lambda g: (g, g.reshape(-1, width).sum(axis=0)), "bias_add")


def expand_rows(v: Tensor, rows: int) -> Tensor:
    """Repeat a vector [n] into [rows, n]."""
    if v.ndim != 1 or rows < 1:
        raise ShapeError(f"expand_rows: need a vector and positive rows, got {v.shape}, {rows}")
    data = np.ascontiguousarray(np.broadcast_to(v.data, (rows, v.shape[0])))
    return _result(data, (v,), lambda g: (g.sum(axis=0),), "expand_rows")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x [t, d_in] times weight [d_out, d_in] transposed, plus optional bias."""
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {weight.shape}")
    out = matmul(x, transpose(weight))
    return bias_add(out, bias) if bias is not None else out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; every other extent must match."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
        if t.shape[axis] < 1:
            raise ShapeError(f"concat: empty extent in {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Split along an axis into pieces of the given positive sizes."""
    axis = axis % x.ndim
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not partition axis {axis} of {x.shape}")
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        pieces.append(_result(np.ascontiguousarray(x.data[index]), (x,), backward, "split"))
        start += size
    return pieces


# --- Nonlinearities and normalization ---

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize along the last axis with optional affine parameters."""
    width = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (width,):
            raise ShapeError(f"layer_norm: parameter {p.shape} does not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data

    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, width).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, width).sum(axis=0))
        return tuple(grads)

    return _result(y, parents, backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _result(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))

    def backward(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return _result(xd * sig, (x,), backward, "silu")


# --- Reductions and lookups ---

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=x.data.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape = x.shape
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.data.dtype),), "mean")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Mean over the positions selected by a boolean mask on the leading axes.

    The mask covers ``x.shape[:mask.ndim]``; the result has the remaining
    trailing shape.

    Raises:
        ShapeError: If the mask shape does not match or selects nothing.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:mask.ndim]:
        raise ShapeError(f"masked_mean: mask {mask.shape} does not cover {x.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("masked_mean: mask selects no positions")
    selected = x.data[mask]

    def backward(g):
        full = np.zeros_like(x.data)
        full[mask] = np.broadcast_to(g / count, selected.shape)
        return (full,)

    return _result(np.ascontiguousarray(selected.mean(axis=0)), (x,), backward, "masked_mean")


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of a [V, d] table; gradients scatter-add into looked-up rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding: table {table.shape} with ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


# --- Verification ---

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               samples: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        f: Zero-argument callable rebuilding a scalar-valued graph from params
        params: Leaf tensors to differentiate (requires_grad must be set)
        h: Finite-difference step
        samples: If given, check only this many random entries per tensor
        rng: Generator used to choose sampled entries

    Returns:
        Max over checked entries of |analytic - numeric| / max(1, |numeric|)

    Raises:
        ShapeError: If f does not return a scalar.
    """
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    for p in params:
        p.zero_grad()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            indices = list(np.ndindex(*p.shape))
            if samples is not None and samples < len(indices):
                chosen = rng.choice(len(indices), size=samples, replace=False)
                indices = [indices[i] for i in sorted(chosen)]
            for index in indices:
                original = p.data[index]
                p.data[index] = original + h
                f_plus = f().item()
                p.data[index] = original - h
                f_minus = f().item()
                p.data[index] = original
                numeric = (f_plus - f_minus) / (2.0 * h)
                worst = max(worst, abs(grad[index] - numeric) / max(1.0, abs(numeric)))
    logger.debug(f"grad_check over {len(params)} tensors: max rel error {worst:.3e}")
    return worst
