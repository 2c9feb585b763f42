"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design rules kept deliberately strict:

* 64-bit floats everywhere, no other dtype.
* Shapes are explicit. Elementwise ops require identical shapes, with the
  single exception that one operand may be a size-1 scalar tensor. Row and
  column broadcasts are separate named ops (`add_rowvec`, `mul_rowvec`,
  `mul_colvec`) so every backward rule stays obvious.
* A thread-local tape records ops in execution order; list index order is a
  valid topological order because inputs are always registered before the
  op that consumes them. `backward()` walks the tape once in reverse and the
  tape is discarded afterwards.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "constant",
    "no_grad",
    "grad_enabled",
    "reset_graph",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "add_rowvec",
    "mul_rowvec",
    "mul_colvec",
    "relu",
    "cos",
    "log",
    "square",
    "tsum",
    "mean",
    "sum_lastdim",
    "sum_row_blocks",
    "reshape",
    "concat_lastdim",
    "concat_rows",
    "gather_rows",
    "softmax_row",
]

_tls = threading.local()


class Tape:
    """Append-only op records; index order is the topological order."""

    __slots__ = ("records", "ids")

    def __init__(self):
        # each record: (out_tensor, parent_tensors, needs_grad_flags, backfn)
        # backfn is None for leaves that were pulled into the graph.
        self.records = []
        self.ids = {}

    def register(self, t):
        nid = self.ids.get(id(t))
        if nid is None:
            nid = len(self.records)
            self.records.append((t, (), (), None))
            self.ids[id(t)] = nid
        return nid

    def record(self, out, parents, needs, backfn):
        for p in parents:
            self.register(p)
        nid = len(self.records)
        self.records.append((out, parents, needs, backfn))
        self.ids[id(out)] = nid
        return nid

    def __len__(self):
        return len(self.records)


def _active_tape(create=False):
    tape = getattr(_tls, "tape", None)
    if tape is None and create:
        tape = Tape()
        _tls.tape = tape
    return tape


def grad_enabled():
    return getattr(_tls, "grad_enabled", True)


class no_grad:
    """Context manager: ops inside do not record onto the tape."""

    def __enter__(self):
        self._prev = grad_enabled()
        _tls.grad_enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.grad_enabled = self._prev
        return False


def reset_graph():
    """Drop the active tape (normally consumed by backward())."""
    _tls.tape = None


class Tensor:
    """Dense float64 array participating in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def node_id(self):
        """Index in the active computation graph, or None for constants."""
        tape = _active_tape()
        return None if tape is None else tape.ids.get(id(self))

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # operator sugar; numbers are lifted to constants / plain scales
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add(self, constant(other))
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return sub(self, constant(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value):
    """Tensor that never receives gradients."""
    return Tensor(np.asarray(value, dtype=np.float64))


def _from_array(arr):
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    return t


def _record(out, parents, backfn):
    if not grad_enabled():
        return
    needs = tuple(p.requires_grad for p in parents)
    if not any(needs):
        return
    out.requires_grad = True
    _active_tape(create=True).record(out, tuple(parents), needs, backfn)


def backward(loss):
    """Accumulate gradients of `loss` into every reachable tensor.

    Consumes the active tape. `.grad` buffers are overwritten, not
    accumulated across calls.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise ValueError("backward: loss is not finite")
    tape = _active_tape()
    nid = None if tape is None else tape.ids.get(id(loss))
    if nid is None:
        raise ValueError("backward: loss is not part of the active graph")

    records = tape.records
    grads = [None] * (nid + 1)
    grads[nid] = np.ones_like(loss.data)
    for k in range(nid, -1, -1):
        g = grads[k]
        grads[k] = None
        if g is None:
            continue
        out, parents, needs, backfn = records[k]
        if out.requires_grad:
            out.grad = g
        if backfn is None:
            continue
        pgrads = backfn(g)
        ids = tape.ids
        for p, need, pg in zip(parents, needs, pgrads):
            if not need or pg is None:
                continue
            pid = ids[id(p)]
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    _tls.tape = None


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    """2-D matrix product [m,k] x [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    out = _from_array(a.data @ b.data)
    ad, bd = a.data, b.data

    def backfn(g):
        return (g @ bd.T, ad.T @ g)

    _record(out, (a, b), backfn)
    return out


def transpose(x):
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects 2-D, got shape {tuple(x.shape)}")
    out = _from_array(np.ascontiguousarray(x.data.T))

    def backfn(g):
        return (np.ascontiguousarray(g.T),)

    _record(out, (x,), backfn)
    return out


def _binary_shapes(a, b, opname):
    if a.shape == b.shape:
        return None
    if a.data.size == 1 or b.data.size == 1:
        return None
    raise ValueError(f"{opname} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce_to(shape, arr):
    """Collapse a broadcast gradient back onto a size-1 operand."""
    if arr.shape == shape:
        return arr
    return np.sum(arr).reshape(shape)


def add(a, b):
    _binary_shapes(a, b, "add")
    out = _from_array(a.data + b.data)
    ashape, bshape = a.shape, b.shape

    def backfn(g):
        return (_reduce_to(ashape, g), _reduce_to(bshape, g))

    _record(out, (a, b), backfn)
    return out


def sub(a, b):
    _binary_shapes(a, b, "sub")
    out = _from_array(a.data - b.data)
    ashape, bshape = a.shape, b.shape

    def backfn(g):
        return (_reduce_to(ashape, g), _reduce_to(bshape, -g))

    _record(out, (a, b), backfn)
    return out


def mul(a, b):
    _binary_shapes(a, b, "mul")
    out = _from_array(a.data * b.data)
    ad, bd = a.data, b.data

    def backfn(g):
        return (_reduce_to(ad.shape, g * bd), _reduce_to(bd.shape, g * ad))

    _record(out, (a, b), backfn)
    return out


def scale(x, c):
    c = float(c)
    out = _from_array(x.data * c)

    def backfn(g):
        return (g * c,)

    _record(out, (x,), backfn)
    return out


def add_rowvec(x, v):
    """x[m,n] + v[1,n], v added to every row."""
    if x.data.ndim != 2 or v.shape != (1, x.shape[1]):
        raise ValueError(f"add_rowvec shape mismatch: {tuple(x.shape)} + {tuple(v.shape)}")
    out = _from_array(x.data + v.data)

    def backfn(g):
        return (g, g.sum(axis=0, keepdims=True))

    _record(out, (x, v), backfn)
    return out


def mul_rowvec(x, v):
    """x[m,n] * v[1,n], each row scaled elementwise by v."""
    if x.data.ndim != 2 or v.shape != (1, x.shape[1]):
        raise ValueError(f"mul_rowvec shape mismatch: {tuple(x.shape)} * {tuple(v.shape)}")
    out = _from_array(x.data * v.data)
    xd, vd = x.data, v.data

    def backfn(g):
        return (g * vd, (g * xd).sum(axis=0, keepdims=True))

    _record(out, (x, v), backfn)
    return out


def mul_colvec(x, c):
    """x[m,n] * c[m,1], each row scaled by its own scalar."""
    if x.data.ndim != 2 or c.shape != (x.shape[0], 1):
        raise ValueError(f"mul_colvec shape mismatch: {tuple(x.shape)} * {tuple(c.shape)}")
    out = _from_array(x.data * c.data)
    xd, cd = x.data, c.data

    def backfn(g):
        return (g * cd, (g * xd).sum(axis=1, keepdims=True))

    _record(out, (x, c), backfn)
    return out


def relu(x):
    out = _from_array(np.maximum(x.data, 0.0))
    pos = x.data > 0

    def backfn(g):
        return (g * pos,)

    _record(out, (x,), backfn)
    return out


def cos(x):
    out = _from_array(np.cos(x.data))
    xd = x.data

    def backfn(g):
        return (-np.sin(xd) * g,)

    _record(out, (x,), backfn)
    return out


def log(x):
    if np.any(x.data <= 0.0):
        raise ValueError("log: input must be strictly positive")
    out = _from_array(np.log(x.data))
    xd = x.data

    def backfn(g):
        return (g / xd,)

    _record(out, (x,), backfn)
    return out


def square(x):
    out = _from_array(x.data * x.data)
    xd = x.data

    def backfn(g):
        return (2.0 * xd * g,)

    _record(out, (x,), backfn)
    return out


def tsum(x):
    """Sum of all entries -> scalar tensor of shape ()."""
    out = _from_array(np.asarray(x.data.sum()))
    shape = x.data.shape

    def backfn(g):
        return (np.full(shape, float(g)),)

    _record(out, (x,), backfn)
    return out


def mean(x):
    out = _from_array(np.asarray(x.data.mean()))
    shape = x.data.shape
    n = x.data.size

    def backfn(g):
        return (np.full(shape, float(g) / n),)

    _record(out, (x,), backfn)
    return out


def sum_lastdim(x):
    """Row sums of a 2-D tensor: [m,n] -> [m,1]."""
    if x.data.ndim != 2:
        raise ValueError(f"sum_lastdim expects 2-D, got shape {tuple(x.shape)}")
    out = _from_array(x.data.sum(axis=1, keepdims=True))
    n = x.shape[1]

    def backfn(g):
        return (np.repeat(g, n, axis=1),)

    _record(out, (x,), backfn)
    return out


def sum_row_blocks(x, block):
    """Sum consecutive groups of `block` rows: [m*block, n] -> [m, n]."""
    if x.data.ndim != 2 or block < 1 or x.shape[0] % block != 0:
        raise ValueError(
            f"sum_row_blocks: shape {tuple(x.shape)} not divisible into blocks of {block}"
        )
    m = x.shape[0] // block
    out = _from_array(x.data.reshape(m, block, x.shape[1]).sum(axis=1))

    def backfn(g):
        return (np.repeat(g, block, axis=0),)

    _record(out, (x,), backfn)
    return out


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise ValueError(f"reshape: cannot view {tuple(x.shape)} as {shape}")
    out = _from_array(x.data.reshape(shape).copy())
    orig = x.data.shape

    def backfn(g):
        return (g.reshape(orig),)

    _record(out, (x,), backfn)
    return out


def concat_lastdim(parts):
    """Concatenate 2-D tensors along the final axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_lastdim: empty input")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ValueError(
                "concat_lastdim row mismatch: "
                + ", ".join(str(tuple(q.shape)) for q in parts)
            )
    out = _from_array(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def backfn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    _record(out, tuple(parts), backfn)
    return out


def concat_rows(parts):
    """Stack 2-D tensors vertically (shared column count)."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows: empty input")
    cols = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != cols:
            raise ValueError(
                "concat_rows column mismatch: "
                + ", ".join(str(tuple(q.shape)) for q in parts)
            )
    out = _from_array(np.concatenate([p.data for p in parts], axis=0))
    heights = [p.shape[0] for p in parts]
    splits = np.cumsum(heights)[:-1]

    def backfn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    _record(out, tuple(parts), backfn)
    return out


def gather_rows(w, idx):
    """Select rows of a 2-D tensor; gradients scatter-add back."""
    if w.data.ndim != 2:
        raise ValueError(f"gather_rows expects 2-D table, got shape {tuple(w.shape)}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows: indices must be 1-D")
    n = w.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise IndexError(f"gather_rows: index {bad} out of range for {n} rows")
    out = _from_array(w.data[idx])
    shape = w.data.shape

    def backfn(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    _record(out, (w,), backfn)
    return out


def softmax_row(x, mask=None):
    """Row-wise softmax with optional exclusion mask (True = excluded).

    Masked entries are exactly 0 in the output; each row needs at least one
    unmasked entry. Stabilized by row-max subtraction.
    """
    if x.data.ndim != 2:
        raise ValueError(f"softmax_row expects 2-D, got shape {tuple(x.shape)}")
    work = x.data.copy()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise ValueError(
                f"softmax_row mask shape {mask.shape} != input shape {tuple(x.shape)}"
            )
        if mask.all(axis=1).any():
            raise ValueError("softmax_row: fully masked row")
        work[mask] = -np.inf
    rowmax = work.max(axis=1, keepdims=True)
    e = np.exp(work - rowmax)  # exp(-inf) == 0.0 exactly for masked slots
    out_arr = e / e.sum(axis=1, keepdims=True)
    out = _from_array(out_arr)

    def backfn(g):
        dot = (g * out_arr).sum(axis=1, keepdims=True)
        return (out_arr * (g - dot),)

    _record(out, (x,), backfn)
    return out
