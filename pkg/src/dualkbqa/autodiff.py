"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tape` is opened as a context manager; every primitive applied while it
is active is appended in execution order together with a closure mapping the
output gradient to input gradients. Outside a tape the same primitives run as
plain numpy computations with no bookkeeping, which is what evaluation and the
finite-difference harness use.

Broadcasting is deliberately narrow. An elementwise op accepts equal shapes,
a trailing-shape operand (``(n,)`` against ``(m, n)``, i.e. bias-add), or a
column operand (``(m, 1)`` against ``(m, n)``, i.e. row-wise scaling).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


def set_debug(enabled: bool) -> None:
    """Turn on NaN/Inf checks for every op result (per thread)."""
    _state.debug = bool(enabled)


def _debug() -> bool:
    return getattr(_state, "debug", False)


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "name", "requires_grad", "_tape", "node_id")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if _debug() and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.name = name
        self.requires_grad = requires_grad
        self._tape = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(self, _wrap(other))

    def __radd__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, float(other))
        return add(_wrap(other), self)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(self, -float(other))
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return add_scalar(scale(self, -1.0), float(other))
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data)


class Tape:
    """Ordered record of primitive applications.

    Node ids are positions in ``self.nodes`` so creation order is already a
    topological order; :meth:`backward` walks it in reverse once.
    """

    def __init__(self):
        self.nodes: list[tuple[tuple[int | None, ...], Callable | None]] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.node_id
        if t.requires_grad:
            nid = len(self.nodes)
            self.nodes.append(((), None))
            t._tape = self
            t.node_id = nid
            self.leaves[nid] = t
            return nid
        return None

    def backward(self, loss: Tensor, store=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every named leaf reached.

        With a ParameterStore, parameters the loss never touched are returned
        as zero arrays so the map covers the whole store.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones_like(loss.data)
        for nid in range(loss.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            inputs, fn = self.nodes[nid]
            if fn is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if inp is None or gi is None:
                    continue
                if grads[inp] is None:
                    grads[inp] = gi
                else:
                    grads[inp] = grads[inp] + gi
        out: dict[str, np.ndarray] = {}
        for nid, leaf in self.leaves.items():
            if leaf.name is None:
                continue
            g = grads[nid]
            out[leaf.name] = np.zeros_like(leaf.data) if g is None else g
        if store is not None:
            for name in store:
                if name not in out:
                    out[name] = np.zeros_like(store[name].data)
        return out


def _record(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _debug() and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite result from {backward.__qualname__.split('.')[0]}")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.name = None
    result.requires_grad = False
    result._tape = None
    result.node_id = None
    tape = _active_tape()
    if tape is None:
        return result
    ids = tuple(tape._node_of(t) for t in inputs)
    if all(i is None for i in ids):
        return result
    result._tape = tape
    result.node_id = len(tape.nodes)
    tape.nodes.append((ids, backward))
    return result


# ---------------------------------------------------------------- shapes

def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) == 2 and (small == big[1:] or small == (big[0], 1)):
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        return g.sum(axis=tuple(range(g.ndim - len(shape))))
    return g.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape

    def add_backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), add_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape

    def sub_backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _record(a.data - b.data, (a, b), sub_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise("mul", a, b)
    ad, bd = a.data, b.data
    need_a, need_b = _tracked(a), _tracked(b)

    def mul_backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        )

    return _record(ad * bd, (a, b), mul_backward)


def scale(a: Tensor, c: float) -> Tensor:
    def scale_backward(g):
        return (g * c,)

    return _record(a.data * c, (a,), scale_backward)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def add_scalar_backward(g):
        return (g,)

    return _record(a.data + c, (a,), add_scalar_backward)


def power(a: Tensor, c: float) -> Tensor:
    ad = a.data

    def power_backward(g):
        if c == 0.0:
            return (np.zeros_like(ad),)
        return (g * c * ad ** (c - 1.0),)

    return _record(ad ** c, (a,), power_backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def sigmoid_backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), sigmoid_backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def tanh_backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), tanh_backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def relu_backward(g):
        return (g * mask,)

    return _record(a.data * mask, (a,), relu_backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def exp_backward(g):
        return (g * out,)

    return _record(out, (a,), exp_backward)


def log(a: Tensor) -> Tensor:
    x = a.data

    def log_backward(g):
        return (g / x,)

    return _record(np.log(x), (a,), log_backward)


# ---------------------------------------------------------------- linear algebra

def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    need_a, need_b = _tracked(a), _tracked(b)

    def matmul_backward(g):
        ga = gb = None
        if ad.ndim == 2 and bd.ndim == 2:
            if need_a:
                ga = g @ bd.T
            if need_b:
                gb = ad.T @ g
        elif ad.ndim == 1 and bd.ndim == 2:
            if need_a:
                ga = bd @ g
            if need_b:
                gb = ad[:, None] * g
        elif ad.ndim == 2:
            if need_a:
                ga = g[:, None] * bd
            if need_b:
                gb = ad.T @ g
        else:
            ga, gb = g * bd, g * ad
        return ga, gb

    return _record(ad @ bd, (a, b), matmul_backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def transpose_backward(g):
        return (g.T,)

    return _record(a.data.T, (a,), transpose_backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None

    def reshape_backward(g):
        return (g.reshape(src),)

    return _record(out, (a,), reshape_backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat(axis={axis}): incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    ax = axis % out.ndim
    bounds = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]

    def concat_backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(out, tuple(tensors), concat_backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors])

    def stack_backward(g):
        return tuple(g)

    return _record(out, tuple(tensors), stack_backward)


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    src = a.shape

    def sum_backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), sum_backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0.

    Every slice must keep at least one unmasked entry.
    """
    x = a.data
    if mask is not None:
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} does not match {x.shape}")
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def softmax_backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), softmax_backward)


# ---------------------------------------------------------------- indexing

def _segment_sum(values: np.ndarray, idx: np.ndarray, num_rows: int) -> np.ndarray:
    """``out[idx[i]] += values[i]``; sort + reduceat, much faster than ufunc.at."""
    out = np.zeros((num_rows,) + values.shape[1:], dtype=DTYPE)
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.concatenate(([True], sidx[1:] != sidx[:-1])))
    out[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def row_select(a: Tensor, indices) -> Tensor:
    """``a[indices]`` along the first axis; an int index drops that axis."""
    src = a.shape
    if isinstance(indices, (int, np.integer)):
        if not -src[0] <= indices < src[0]:
            raise ShapeError(f"row_select: index {indices} out of range for shape {src}")
        idx = int(indices)

        def row_backward(g):
            full = np.zeros(src, dtype=DTYPE)
            full[idx] = g
            return (full,)

        return _record(a.data[idx], (a,), row_backward)

    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= src[0]):
        raise ShapeError(f"row_select: indices out of range for shape {src}")

    def rows_backward(g):
        return (_segment_sum(g, idx, src[0]),)

    return _record(a.data[idx], (a,), rows_backward)


def scatter_add(a: Tensor, rows, num_rows: int) -> Tensor:
    """Sum row ``i`` of ``a`` into output row ``rows[i]`` of a zero array."""
    idx = np.asarray(rows, dtype=np.intp)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_add: {idx.shape[0]} targets for input shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter_add: target rows out of range for {num_rows} rows")
    out = _segment_sum(a.data, idx, num_rows)

    def scatter_add_backward(g):
        return (g[idx],)

    return _record(out, (a,), scatter_add_backward)
