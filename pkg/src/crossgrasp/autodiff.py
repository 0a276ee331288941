"""Reverse-mode automatic differentiation on dense numpy arrays.

A :class:`Tensor` wraps a row-major float array (float32 by default, float64
for shadow-mode gradient checking).  Primitive applications are recorded on an
explicit :class:`Tape`; :func:`backward` walks the tape once in reverse and
returns a gradient for every requires-grad leaf.  There is no persistent
graph: a tape lives for one training step and is reset (or discarded)
afterwards.  A second backward on the same tape is rejected.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "DomainError",
    "TapeError",
    "apply_primitive",
    "backward",
    "finite_difference_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax_lastdim",
    "layernorm_lastdim",
    "concat_lastdim",
    "slice_lastdim",
    "tensor_sum",
    "tensor_mean",
    "transpose_2d",
    "embedding_lookup",
]

LAYERNORM_EPS = 1e-5


class ShapeMismatchError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rules."""


class DomainError(ValueError):
    """Raised when log/softmax receive inputs outside their domain."""


class TapeError(RuntimeError):
    """Raised on tape misuse (repeated backward, detached loss, ...)."""


class Tensor:
    """Shape-tagged dense array participating in a gradient tape.

    ``node_id`` is the identity used on tapes and in gradient maps; it is
    unique per Tensor.  Shape is fixed at construction.  ``data`` may be
    rewritten in place by an optimizer but must never change shape or dtype.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(Tensor._ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    """One recorded primitive application."""

    __slots__ = ("op", "inputs", "out_id", "out_shape", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], out_id: int,
                 out_shape: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.out_id = out_id
        self.out_shape = out_shape
        # backward_fn(grad_out, needs) -> tuple of grads aligned with inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of primitive applications, single-owner.

    Use as a context manager; ops executed inside record a node whenever any
    input requires grad.  ``backward`` may be called once per tape; call
    :meth:`reset` to reuse.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._by_output: dict[int, int] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        self._nodes.clear()
        self._by_output.clear()
        self._consumed = False

    def _record(self, node: _Node) -> None:
        self._by_output[node.out_id] = len(self._nodes)
        self._nodes.append(node)


_ACTIVE_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _check_dtypes(op: str, inputs: Sequence[Tensor]) -> None:
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ShapeMismatchError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _make(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    """Build the output tensor and record a tape node if one is active."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    tape = _active_tape()
    if needs and tape is not None:
        tape._record(_Node(op, inputs, out.node_id, out.shape, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", (a, b))
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g, needs):
        ga = gb = None
        if needs[0]:
            gg = g @ np.swapaxes(b.data, -2, -1)
            ga = gg if gg.shape == a.shape else _unbroadcast(gg, a.shape)
        if needs[1]:
            if b.ndim == 2 and g.ndim > 2:
                # batched @ fixed-matrix: accumulate over flattened batch rows
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gg = np.swapaxes(a.data, -2, -1) @ g
                gb = gg if gg.shape == b.shape else _unbroadcast(gg, b.shape)
        return ga, gb

    return _make("matmul", (a, b), out, bwd)


def _elementwise_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", (a, b))
    _elementwise_shapes("add", a, b)
    out = a.data + b.data

    def bwd(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", (a, b))
    _elementwise_shapes("sub", a, b)
    out = a.data - b.data

    def bwd(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", (a, b))
    _elementwise_shapes("mul", a, b)
    out = a.data * b.data

    def bwd(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _make("mul", (a, b), out, bwd)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    out = x.data * c

    def bwd(g, needs):
        return (g * c if needs[0] else None,)

    return _make("scalar-mul", (x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g, needs):
        return (g * (1.0 - y * y) if needs[0] else None,)

    return _make("tanh", (x,), y, bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)

    def bwd(g, needs):
        return (g * y * (1.0 - y) if needs[0] else None,)

    return _make("sigmoid", (x,), y, bwd)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def bwd(g, needs):
        return (g * (x.data > 0) if needs[0] else None,)

    return _make("relu", (x,), y, bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g, needs):
        return (g * y if needs[0] else None,)

    return _make("exp", (x,), y, bwd)


def log(x: Tensor) -> Tensor:
    if not np.isfinite(x.data).all() or (x.data <= 0).any():
        raise DomainError("log: input must be finite and positive")
    y = np.log(x.data)

    def bwd(g, needs):
        return (g / x.data if needs[0] else None,)

    return _make("log", (x,), y, bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    if not np.isfinite(x.data).all():
        raise DomainError("softmax-lastdim: non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax-lastdim", (x,), y, bwd)


def layernorm_lastdim(x: Tensor) -> Tensor:
    """Normalize the last dim to zero mean / unit variance (no affine)."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(LAYERNORM_EPS))
    xhat = xc * inv

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layernorm-lastdim", (x,), xhat, bwd)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeMismatchError("concat-lastdim: empty input list")
    _check_dtypes("concat-lastdim", parts)
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatchError(
                f"concat-lastdim: leading dims differ, {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def bwd(g, needs):
        grads = []
        off = 0
        for w, need in zip(widths, needs):
            grads.append(g[..., off:off + w] if need else None)
            off += w
        return tuple(grads)

    return _make("concat-lastdim", parts, out, bwd)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[-1]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatchError(f"slice-lastdim: [{start}:{stop}] out of range for width {n}")
    out = np.ascontiguousarray(x.data[..., start:stop])

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make("slice-lastdim", (x,), out, bwd)


def tensor_sum(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (axis=None) or over the last dim (axis=-1)."""
    if axis not in (None, -1):
        raise ShapeMismatchError(f"sum: unsupported axis {axis}")
    out = x.data.sum(axis=axis)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype, copy=True),)
        return (np.broadcast_to(g[..., None], x.shape).astype(x.data.dtype, copy=True),)

    return _make("sum", (x,), np.asarray(out, dtype=x.data.dtype), bwd)


def tensor_mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis not in (None, -1):
        raise ShapeMismatchError(f"mean: unsupported axis {axis}")
    out = x.data.mean(axis=axis)
    n = x.size if axis is None else x.shape[-1]
    inv = x.data.dtype.type(1.0 / n)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g * inv, x.shape).astype(x.data.dtype, copy=True),)
        return (np.broadcast_to((g * inv)[..., None], x.shape).astype(x.data.dtype, copy=True),)

    return _make("mean", (x,), np.asarray(out, dtype=x.data.dtype), bwd)


def transpose_2d(x: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for 2-d tensors)."""
    if x.ndim < 2:
        raise ShapeMismatchError(f"transpose-2d: needs >=2-d, got {x.shape}")
    out = np.ascontiguousarray(np.swapaxes(x.data, -2, -1))

    def bwd(g, needs):
        return (np.swapaxes(g, -2, -1) if needs[0] else None,)

    return _make("transpose-2d", (x,), out, bwd)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d table; gradient scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding-lookup: table must be 2-d, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"embedding-lookup: index out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make("embedding-lookup", (table,), out, bwd)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul-elementwise": mul,
    "scalar-mul": scalar_mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "softmax-lastdim": softmax_lastdim,
    "layernorm-lastdim": layernorm_lastdim,
    "concat-lastdim": concat_lastdim,
    "slice-lastdim": slice_lastdim,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "transpose-2d": transpose_2d,
    "embedding-lookup": embedding_lookup,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Dispatch a primitive by kind name (see ``_PRIMITIVES`` for the set)."""
    if kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive kind {kind!r}")
    fn = _PRIMITIVES[kind]
    if kind == "concat-lastdim":
        return fn(inputs, **params)
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns node_id -> gradient Tensor.

    Every requires-grad leaf seen by the tape gets an entry; leaves not
    reachable from the loss get exact zeros.  A tape may be swept once; call
    ``tape.reset()`` before reuse.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node_id not in tape._by_output:
        raise TapeError("backward: loss is not an output recorded on this tape")
    if tape._consumed:
        raise TapeError("backward: tape already consumed; reset() before reuse")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        needs = tuple(
            t.requires_grad or t.node_id in tape._by_output for t in node.inputs
        )
        in_grads = node.backward_fn(g, needs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi

    result: dict[int, Tensor] = {}
    for node in tape._nodes:
        for t in node.inputs:
            if t.requires_grad and t.node_id not in tape._by_output \
                    and t.node_id not in result:
                g = grads.get(t.node_id)
                if g is None:
                    g = np.zeros_like(t.data)
                result[t.node_id] = Tensor(g, dtype=t.data.dtype)
    return result


def finite_difference_check(f, x: Tensor, h: float = 1e-3, coords=None) -> float:
    """Max relative error of the analytic gradient of ``f`` at ``x``.

    ``f`` must be a deterministic scalar-valued function of one Tensor built
    from recorded primitives.  Central differences are evaluated off-tape in
    the dtype of ``x`` (pass a float64 tensor for shadow-mode accuracy).
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    if h <= 0:
        raise ValueError("finite_difference_check: h must be positive")
    xg = Tensor(x.data.copy(), requires_grad=True, dtype=x.data.dtype)
    with Tape() as tape:
        y = f(xg)
    if not np.isfinite(y.data).all():
        raise DomainError("finite_difference_check: f(x) is not finite")
    analytic = backward(y, tape)[xg.node_id].data.ravel()

    flat = x.data.ravel()
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.data, dtype=x.data.dtype)).data.item()
        flat[i] = orig - h
        fm = f(Tensor(x.data, dtype=x.data.dtype)).data.item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(float(analytic[i]) - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
