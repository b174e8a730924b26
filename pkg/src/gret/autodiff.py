"""Reverse-mode automatic differentiation on a flat tape.

Every differentiable op appends one node to the active Graph (a tape).
Topological order is insertion order by construction, so backward() is a
single reverse sweep over the tape; no sorting, no recursion.  Data is
always float64, row-major.  Graphs are cheap throwaway objects: one per
forward pass, dropped after backward.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; message names both."""


class ContractError(ValueError):
    """A documented precondition was violated (non-scalar loss, fully
    masked softmax row, bad finite-difference step, ...)."""


class Node:
    __slots__ = ("out", "parents", "backward_fn", "op", "graph")

    def __init__(self, out, parents, backward_fn, op, graph):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.graph = graph


class Graph:
    """Append-only record of one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def append(self, node):
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)


_active_graph: Graph | None = None
_grad_enabled: bool = True


@contextlib.contextmanager
def record(graph: Graph | None = None):
    """Make `graph` (or a fresh one) the active tape within the block."""
    global _active_graph
    g = graph if graph is not None else Graph()
    prev = _active_graph
    _active_graph = g
    try:
        yield g
    finally:
        _active_graph = prev


@contextlib.contextmanager
def no_grad():
    """Disable taping; ops run forward-only inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def active_graph() -> Graph | None:
    return _active_graph


class Tensor:
    """Dense float64 array plus an optional tape reference.

    grad is None until backward touches the tensor; afterwards it always
    holds a buffer (zeros if the tensor never influenced the loss).
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item: tensor has {self.data.size} elements, expected 1")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; all arithmetic routes through the module-level ops

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _should_record(*parents: Tensor) -> bool:
    if not _grad_enabled or _active_graph is None:
        return False
    return any(p.requires_grad or p.node is not None for p in parents)


def _register(out: Tensor, parents, backward_fn, op: str) -> Tensor:
    if _should_record(*parents):
        out.requires_grad = True
        out.node = Node(out, tuple(parents), backward_fn, op, _active_graph)
        _active_graph.append(out.node)
    return out


_sweep: dict | None = None


def _accum(t: Tensor, g):
    # called from backward rules only; collects into the per-sweep buffer so
    # that repeated backward() calls accumulate exactly one d(loss)/dt each
    if not (t.requires_grad or t.node is not None):
        return
    entry = _sweep.get(id(t))
    if entry is None:
        _sweep[id(t)] = [t, np.array(g, dtype=np.float64, copy=True)]
    else:
        entry[1] = entry[1] + g


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"unbroadcast: cannot reduce {g.shape} to {shape}")
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} vs {b.data.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        _accum(a, unbroadcast(g, a.data.shape))
        _accum(b, unbroadcast(g, b.data.shape))

    return _register(out, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        _accum(a, unbroadcast(g, a.data.shape))
        _accum(b, unbroadcast(-g, b.data.shape))

    return _register(out, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        _accum(a, unbroadcast(g * b.data, a.data.shape))
        _accum(b, unbroadcast(g * a.data, b.data.shape))

    return _register(out, (a, b), backward_fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = Tensor(a.data / b.data)

    def backward_fn(g):
        _accum(a, unbroadcast(g / b.data, a.data.shape))
        _accum(b, unbroadcast(-g * out.data / b.data, b.data.shape))

    return _register(out, (a, b), backward_fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def backward_fn(g):
        _accum(a, -g)

    return _register(out, (a,), backward_fn, "neg")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    out = Tensor(np.maximum(a.data, b.data))

    def backward_fn(g):
        take_a = a.data >= b.data
        _accum(a, unbroadcast(g * take_a, a.data.shape))
        _accum(b, unbroadcast(g * ~take_a, b.data.shape))

    return _register(out, (a, b), backward_fn, "maximum")


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward_fn(g):
        _accum(a, g * out.data)

    return _register(out, (a,), backward_fn, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward_fn(g):
        _accum(a, g / a.data)

    return _register(out, (a,), backward_fn, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def backward_fn(g):
        _accum(a, g / (2.0 * out.data))

    return _register(out, (a,), backward_fn, "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward_fn(g):
        _accum(a, g * (1.0 - out.data * out.data))

    return _register(out, (a,), backward_fn, "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable two-sided form, never exponentiates a positive argument
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data)

    def backward_fn(g):
        _accum(a, g * out.data * (1.0 - out.data))

    return _register(out, (a,), backward_fn, "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def backward_fn(g):
        _accum(a, g * (a.data > 0))

    return _register(out, (a,), backward_fn, "relu")


# ---------------------------------------------------------------------------
# contractions and reductions


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking semantics; operands must be >= 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        _accum(a, unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        _accum(b, unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _register(out, (a, b), backward_fn, "matmul")


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _register(out, (a,), backward_fn, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in _normalize_axes(axis, a.data.ndim)])

    def backward_fn(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims) / count)

    return _register(out, (a,), backward_fn, "mean")


def sorted_sum(a, axis: int, keepdims: bool = False) -> Tensor:
    """Reduction whose result is invariant to permutations along `axis`.

    Addends are sorted by value before summing, pinning the accumulation
    order regardless of input order.  The gradient of a sum is 1 per
    addend, so sorting is invisible to backward.
    """
    a = as_tensor(a)
    out = Tensor(np.sort(a.data, axis=axis).sum(axis=axis, keepdims=keepdims))

    def backward_fn(g):
        _accum(a, _expand_reduced(g, a.data.shape, axis, keepdims))

    return _register(out, (a,), backward_fn, "sorted_sum")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axis is None and not keepdims:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, _normalize_axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward_fn(g):
        _accum(a, g.reshape(a.data.shape))

    return _register(out, (a,), backward_fn, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        _accum(a, np.transpose(g, inverse))

    return _register(out, (a,), backward_fn, "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _register(out, tuple(tensors), backward_fn, "concat")


def slice_(a, idx) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof); view semantics forward,
    scatter on backward."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _register(out, (a,), backward_fn, "slice")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.data.shape} to {tuple(shape)}") from None
    out = Tensor(out_data.copy())

    def backward_fn(g):
        _accum(a, unbroadcast(g, a.data.shape))

    return _register(out, (a,), backward_fn, "broadcast")


def apply_mask(a, mask) -> Tensor:
    """Zero entries where mask is False.  Masked slots are exactly 0.0 in the
    output no matter what the input held, so downstream results are bitwise
    independent of masked content."""
    a = as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out = Tensor(np.where(m, a.data, 0.0))

    def backward_fn(g):
        _accum(a, g * m)

    return _register(out, (a,), backward_fn, "apply_mask")


def take_rows(table, ids) -> Tensor:
    """Row gather (embedding lookup): out[..., :] = table[ids[...], :]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError(f"take_rows: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(
            f"take_rows: id out of range [0, {table.data.shape[0]}), "
            f"got min={ids.min()} max={ids.max()}")
    out = Tensor(table.data[ids])

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.ravel(), g.reshape(-1, *table.data.shape[1:]))
        _accum(table, full)

    return _register(out, (table,), backward_fn, "take_rows")


# ---------------------------------------------------------------------------
# fused softmax


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax with optional boolean mask.

    Masked entries are exactly 0.0 in the output.  A row with no unmasked
    entry has no well-defined distribution and raises ContractError.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=axis).all():
            raise ContractError("softmax: fully masked row")
        shift = np.max(np.where(m, x, -np.inf), axis=axis, keepdims=True)
        # exponentiate only over unmasked entries; masked ones may hold
        # arbitrarily large junk that would overflow exp before the where
        z = np.where(m, np.exp(np.where(m, x - shift, 0.0)), 0.0)
    else:
        shift = np.max(x, axis=axis, keepdims=True)
        z = np.exp(x - shift)
    p = z / z.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def backward_fn(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accum(a, p * (g - inner))

    return _register(out, (a,), backward_fn, "softmax")


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor):
    """Reverse sweep over the tape that produced `loss`.

    Requires a scalar loss.  Gradients accumulate: calling backward twice
    doubles them.  Tensors on the tape that never influenced the loss end
    with zero-filled grad buffers rather than None.
    """
    global _sweep
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    sweep: dict = {}
    sweep[id(loss)] = [loss, np.ones_like(loss.data)]
    _sweep = sweep
    try:
        if loss.node is not None:
            # one reverse pass over the tape that recorded the loss;
            # insertion order is topological by construction, so every
            # consumer is processed before its producer
            for node in reversed(loss.node.graph.nodes):
                entry = sweep.get(id(node.out))
                if entry is None:
                    # output never fed the loss: zero buffer, never absent
                    entry = [node.out, np.zeros_like(node.out.data)]
                    sweep[id(node.out)] = entry
                node.backward_fn(entry[1])
    finally:
        _sweep = None
    for t, g in sweep.values():
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Compare analytic gradients of scalar f(x) against central differences.

    Returns the max relative error max(|a-n| / max(1, |a|, |n|)) over the
    coordinates of x.  Raises ContractError for eps <= 0, a non-scalar f,
    or an f that is not deterministic (two evaluations must agree bitwise).
    """
    if eps <= 0:
        raise ContractError(f"finite_difference_check: eps must be positive, got {eps}")

    with no_grad():
        y0 = f(x)
        y1 = f(x)
    if not isinstance(y0, Tensor) or y0.data.size != 1:
        raise ContractError("finite_difference_check: f must return a scalar Tensor")
    if y0.data.tobytes() != y1.data.tobytes():
        raise ContractError("finite_difference_check: f is not deterministic")

    x.requires_grad = True
    x.grad = None
    with record():
        loss = f(x)
        backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
