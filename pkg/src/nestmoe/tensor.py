"""Dense-tensor arithmetic with reverse-mode differentiation.

The engine is deliberately small: a `Tensor` wraps a contiguous numpy
array, and every differentiable operation appends one node to the active
`Graph` (a tape). Execution order is a topological order by construction,
so `Graph.backward` simply walks the tape in reverse, visiting every node
exactly once and accumulating gradients additively.

Determinism contract: reductions delegate to numpy's kernels (pairwise
summation, BLAS matrix products), whose accumulation order is fixed for a
given shape on a given platform. Repeated runs with identical inputs are
therefore bit-identical; this is what the reproducibility tests pin down.
Note that BLAS results are *not* bit-stable under column subsetting of an
operand, which is why the nested-expert code evaluates weight matrices in
fixed column blocks (see `nested.py`).
"""

import numpy as np

from .errors import ContractError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_graph")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Same data, severed from the graph (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        if self._graph is None:
            raise ContractError("backward() on a tensor that was not recorded on a graph")
        self._graph.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Tape of recorded operations, in execution (= topological) order."""

    _active = None

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        if Graph._active is not None:
            raise ContractError("graph recording is single-threaded; a graph is already active")
        Graph._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Graph._active = None
        return False

    def backward(self, loss):
        """Populate .grad on every requires_grad tensor reachable from `loss`.

        Gradients accumulate additively across multiple uses of a tensor.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise ContractError("backward() requires a scalar loss tensor")
        if loss._graph is not self:
            raise ContractError("loss was not recorded on this graph")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward_fn(g)


def _record(out, backward_fn):
    graph = Graph._active
    if graph is not None and out.requires_grad:
        out._graph = graph
        graph._nodes.append(_Node(out, backward_fn))
    return out


def _tracked(*operands):
    """True if any Tensor operand wants gradients and a graph is recording."""
    return Graph._active is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in operands
    )


def _accum(t, g):
    # First contribution copies: backward rules may hand out views.
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Reduce gradient `g` back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _data_of(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a, b):
    """Matrix product. 2-D operands, or stacked matrices with identical
    leading dimensions (no broadcasting across the stack).

    Backward: dA = dC @ B^T, dB = A^T @ dC (transposes on the last two axes).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul operands must stack identically: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=_tracked(a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, backward_fn)


def add(a, b):
    a_data, b_data = _data_of(a), _data_of(b)
    out = Tensor(a_data + b_data, requires_grad=_tracked(a, b))

    def backward_fn(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g, a_data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(g, b_data.shape))

    return _record(out, backward_fn)


def mul(a, b):
    a_data, b_data = _data_of(a), _data_of(b)
    out = Tensor(a_data * b_data, requires_grad=_tracked(a, b))

    def backward_fn(g):
        if isinstance(a, Tensor) and a.requires_grad:
            _accum(a, _unbroadcast(g * b_data, a_data.shape))
        if isinstance(b, Tensor) and b.requires_grad:
            _accum(b, _unbroadcast(g * a_data, b_data.shape))

    return _record(out, backward_fn)


def linear(x, w):
    """x @ w^T for a weight stored as (out_features, in_features)."""
    return matmul(x, transpose(w))


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = Tensor(x.data * s, requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, g * (s * (1.0 + x.data * (1.0 - s))))

    return _record(out, backward_fn)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _record(out, backward_fn)


ACTIVATIONS = {"silu": silu, "relu": relu}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ContractError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# normalization / softmax / losses


def rmsnorm(x, gain, eps=1e-5):
    """Root-mean-square normalization over the last axis, learned scale only.

    y = gain * x / sqrt(mean(x^2, -1) + eps)
    """
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm gain shape {gain.shape} does not match last axis of {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(np.square(x.data), axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out = Tensor(normed * gain.data, requires_grad=_tracked(x, gain))

    def backward_fn(g):
        if gain.requires_grad:
            _accum(gain, (g * normed).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gu = g * gain.data
            dot = np.sum(gu * x.data, axis=-1, keepdims=True)
            _accum(x, inv * gu - (inv**3 / d) * x.data * dot)

    return _record(out, backward_fn)


def softmax(x):
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(y, requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, y * (g - np.sum(g * y, axis=-1, keepdims=True)))

    return _record(out, backward_fn)


def cross_entropy(logits, targets):
    """Mean of -log softmax(logits)[target] over rows.

    `targets` is an integer array of class indices, one per logits row.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, c = logits.shape
    if n < 1:
        raise ContractError("cross_entropy needs at least one row")
    t = np.asarray(targets)
    if t.shape != (n,):
        raise ShapeError(f"cross_entropy targets shape {t.shape} does not match logits rows {n}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"cross_entropy target out of range [0, {c})")
    z = logits.data
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    denom = np.sum(e, axis=-1, keepdims=True)
    log_probs = (z - m) - np.log(denom)
    rows = np.arange(n)
    out = Tensor(np.asarray(-np.mean(log_probs[rows, t]), dtype=z.dtype),
                 requires_grad=_tracked(logits))

    def backward_fn(g):
        if logits.requires_grad:
            dz = e / denom
            dz[rows, t] -= 1.0
            _accum(logits, dz * (g / n))

    return _record(out, backward_fn)


# ---------------------------------------------------------------------------
# lookup / shape / selection


def embedding(table, ids):
    """Row lookup: out[..., :] = table[ids[...], :]."""
    idx = np.asarray(ids)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v})")
    out = Tensor(table.data[idx], requires_grad=_tracked(table))

    def backward_fn(g):
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx.ravel(), g.reshape(-1, table.shape[1]))
            _accum(table, dt)

    return _record(out, backward_fn)


def reshape(x, shape):
    out = Tensor(np.reshape(x.data, shape), requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, np.reshape(g, x.data.shape))

    return _record(out, backward_fn)


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes), requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, np.transpose(g, inverse))

    return _record(out, backward_fn)


def slice_axis(x, axis, start, stop):
    """Contiguous slice [start:stop) along one axis (view; no copy)."""
    index = tuple(slice(None) if a != axis else slice(start, stop) for a in range(x.ndim))
    out = Tensor(x.data[index], requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[index] = g
            _accum(x, dx)

    return _record(out, backward_fn)


def select_rows(tensors, index):
    """Per-row selection among same-shaped tensors: out[b] = tensors[index[b]][b].

    The forward is an exact row copy, so selected values are bit-identical
    to the source tensor's rows. Gradient routes each row back to the
    tensor it was taken from.
    """
    idx = np.asarray(index)
    first = tensors[0]
    if idx.shape != (first.shape[0],):
        raise ShapeError(f"select_rows index shape {idx.shape} does not match rows {first.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= len(tensors)):
        raise IndexError(f"select_rows index out of range [0, {len(tensors)})")
    data = np.empty_like(first.data)
    masks = []
    for e, t in enumerate(tensors):
        if t.shape != first.shape:
            raise ShapeError(f"select_rows operand shapes differ: {t.shape} vs {first.shape}")
        mask = idx == e
        masks.append(mask)
        data[mask] = t.data[mask]
    out = Tensor(data, requires_grad=_tracked(*tensors))

    def backward_fn(g):
        for t, mask in zip(tensors, masks):
            if t.requires_grad:
                dt = np.zeros_like(t.data)
                dt[mask] = g[mask]
                _accum(t, dt)

    return _record(out, backward_fn)


def take_per_row(x, index):
    """Pick one column per row: out[b, 0] = x[b, index[b]]."""
    idx = np.asarray(index)
    n = x.shape[0]
    if idx.shape != (n,):
        raise ShapeError(f"take_per_row index shape {idx.shape} does not match rows {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"take_per_row index out of range [0, {x.shape[1]})")
    rows = np.arange(n)
    out = Tensor(x.data[rows, idx][:, None], requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[rows, idx] = g[:, 0]
            _accum(x, dx)

    return _record(out, backward_fn)


def reduce_sum(x):
    """Sum of all elements, as a 0-d tensor."""
    out = Tensor(np.asarray(np.sum(x.data), dtype=x.dtype), requires_grad=_tracked(x))

    def backward_fn(g):
        if x.requires_grad:
            _accum(x, np.broadcast_to(g, x.data.shape))

    return _record(out, backward_fn)


def reduce_mean(x):
    return mul(reduce_sum(x), 1.0 / x.size)
