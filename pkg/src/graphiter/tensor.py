"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed inside a ``with Tape() as tape:`` block are recorded on
that tape whenever one of their inputs requires a gradient. Outside a tape
nothing is recorded, which is the inference path.

Example:
    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> grads = backward(loss, tape)
    >>> grads[x]
    array([2., 4.])
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "Gradients",
    "Parameter",
    "backward",
    "matmul",
    "apply_activation",
    "relu",
    "leaky_relu",
    "sigmoid",
    "segment_reduce",
    "segment_softmax",
    "concat_rows",
    "gather_rows",
    "maximum",
    "where",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_tape_ids = itertools.count(1)
_active_tapes: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Nodes are appended in execution order, so every node's inputs precede it.
    A tape is single-threaded and is meant to be discarded after ``backward``.
    """

    def __init__(self) -> None:
        self.id = next(_tape_ids)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _current_tape() -> Tape | None:
    return _active_tapes[-1] if _active_tapes else None


class Tensor:
    """Immutable n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "tape_id", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic -----------------------------------------------------------
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

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A learnable tensor addressed by a stable string path."""

    __slots__ = ()

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True, name=name)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.setflags(write=False)
    out.data = data
    out.name = None
    out.tape_id = None
    tape = _current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.tape_id = tape.id
        tape.nodes.append((out, tuple(parents), backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "maximum")
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# shape manipulation -------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def index_select(a, index) -> Tensor:
    """Basic or advanced indexing; the gradient scatters back with accumulation."""
    a = _as_tensor(a)

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), back)


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), back)


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis) * (1.0 / count)


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# activations --------------------------------------------------------------

def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, slope * x.data), (x,),
                 lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


HOMOGENEOUS_ACTIVATIONS = frozenset({"relu", "leaky_relu", "identity"})


def apply_activation(kind: str, x, slope: float = 0.01) -> Tensor:
    """Apply ``relu``, ``leaky_relu``, ``sigmoid`` or ``identity`` elementwise."""
    x = _as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"non-finite input to {kind}")
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# graph primitives ---------------------------------------------------------

def _check_segments(ids: np.ndarray, num_segments: int, rows: int) -> None:
    if num_segments < 1:
        raise ValueError("num_segments must be >= 1")
    if ids.shape != (rows,):
        raise DimensionError(f"segment ids shape {ids.shape} does not match {rows} rows")
    if rows and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]``; backward sums duplicate indices."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"row index out of range [0, {x.shape[0]})")

    def back(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), back)


def segment_reduce(values, segment_ids, num_segments: int, mode: str = "sum",
                   fill: float | None = None) -> Tensor:
    """Reduce rows of ``values`` that share a segment id.

    ``max`` routes the gradient to the first row attaining the maximum. An
    empty segment under ``max`` raises unless ``fill`` is given; ``sum`` and
    ``mean`` give zeros for empty segments.
    """
    values = _as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    _check_segments(ids, num_segments, values.shape[0])
    trailing = values.shape[1:]
    counts = np.bincount(ids, minlength=num_segments)

    if mode in ("sum", "mean"):
        out = np.zeros((num_segments,) + trailing)
        np.add.at(out, ids, values.data)
        if mode == "mean":
            scale = 1.0 / np.maximum(counts, 1)
            out *= scale.reshape((-1,) + (1,) * len(trailing))
            row_scale = scale[ids].reshape((-1,) + (1,) * len(trailing))
            return _make(out, (values,), lambda g: (g[ids] * row_scale,))
        return _make(out, (values,), lambda g: (g[ids],))

    if mode != "max":
        raise ValueError(f"unknown reduction mode {mode!r}")
    empty = counts == 0
    if empty.any() and fill is None:
        raise ValueError("max reduction over an empty segment requires a fill value")
    out = np.full((num_segments,) + trailing, -np.inf)
    np.maximum.at(out, ids, values.data)
    rows = values.shape[0]
    flat_vals = values.data.reshape(rows, -1)
    flat_out = out.reshape(num_segments, -1)
    attains = flat_vals == flat_out[ids]
    row_idx = np.broadcast_to(np.arange(rows)[:, None], attains.shape)
    first = np.full(flat_out.shape, rows, dtype=np.int64)
    np.minimum.at(first, ids, np.where(attains, row_idx, rows))
    if empty.any():
        out[empty] = fill
    seg_mask = ~empty

    def back(g):
        gflat = g.reshape(num_segments, -1)
        grad = np.zeros_like(flat_vals)
        segs, cols = np.nonzero(np.broadcast_to(seg_mask[:, None], first.shape))
        grad[first[segs, cols], cols] = gflat[segs, cols]
        return (grad.reshape(values.shape),)

    return _make(out, (values,), back)


def segment_softmax(scores, segment_ids, num_segments: int) -> Tensor:
    """Softmax of a score vector within each segment."""
    scores = _as_tensor(scores)
    ids = np.asarray(segment_ids, dtype=np.int64)
    _check_segments(ids, num_segments, scores.shape[0])
    peak = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(peak, ids, scores.data)
    e = np.exp(scores.data - peak[ids])
    denom = np.zeros_like(peak)
    np.add.at(denom, ids, e)
    out = e / denom[ids]

    def back(g):
        dot = np.zeros_like(peak)
        np.add.at(dot, ids, g * out)
        return (out * (g - dot[ids]),)

    return _make(out, (scores,), back)


def concat_rows(parts: Sequence) -> Tensor:
    """Concatenate N x d_i tensors column-wise into N x sum(d_i)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise DimensionError(f"concat_rows: row counts differ {[p.shape for p in parts]}")
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return _make(np.concatenate([p.data for p in parts], axis=1), parts,
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))))


# differentiation ----------------------------------------------------------

class Gradients:
    """Gradient map keyed by tensor identity; absent entries read as zeros."""

    def __init__(self, store: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._store = store
        self._keep = keep

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        grad = self._store.get(id(tensor))
        if grad is None or self._keep.get(id(tensor)) is not tensor:
            return np.zeros(tensor.shape)
        return grad

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._store and self._keep.get(id(tensor)) is tensor


def backward(loss: Tensor, tape: Tape) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss`` through ``tape``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    store: dict[int, np.ndarray] = {}
    keep: dict[int, Tensor] = {}
    if loss.tape_id != tape.id:
        return Gradients(store, keep)
    store[id(loss)] = np.ones(loss.shape)
    keep[id(loss)] = loss
    for out, parents, back in reversed(tape.nodes):
        g = store.get(id(out))
        if g is None:
            continue
        for parent, pg in zip(parents, back(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in store:
                store[key] = store[key] + pg
            else:
                store[key] = pg
                keep[key] = parent
    return Gradients(store, keep)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6,
                      seed: int = 0, atol: float = 1e-8) -> float:
    """Worst relative error between tape and central-difference gradients.

    A tensor-valued ``f`` is reduced to a scalar through a fixed random
    projection. Relative error uses ``max(|analytic|, |numeric|, atol)``;
    ``atol`` should sit above the round-off floor ``ulp(f) / h`` of the
    difference quotient.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    probe = f(Tensor(base))
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe.shape)

    def scalar(arr: np.ndarray) -> float:
        return float(np.sum(f(Tensor(arr)).data * weights))

    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        loss = (f(leaf) * weights).sum()
    analytic = backward(loss, tape)[leaf]

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (scalar(plus.reshape(base.shape)) - scalar(minus.reshape(base.shape))) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
        worst = max(worst, err)
    return worst


def param_diff_check(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                     h: float = 1e-6, max_coords: int | None = None, seed: int = 0,
                     atol: float = 1e-8) -> float:
    """Finite-difference check of a scalar loss w.r.t. parameters, in place.

    Parameters are temporarily perturbed through their (otherwise read-only)
    buffers. ``max_coords`` samples a random subset of coordinates.
    """
    params = list(params)
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape)
    rng = np.random.default_rng(seed)
    coords = [(p, i) for p in params for i in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]
    worst = 0.0
    for p, i in coords:
        buf = p.data
        buf.setflags(write=True)
        flat = buf.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        buf.setflags(write=False)
        numeric = (up - down) / (2 * h)
        a = grads[p].reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), atol))
    return worst
