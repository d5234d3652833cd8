"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive returns a new :class:`Tensor`.  When any input requires a
gradient (and recording is enabled) the output carries a :class:`Node` holding
its parents and a vector-Jacobian product closure.  :func:`backward` sorts the
recorded graph topologically into a tape, walks it once in reverse and marks
every node consumed so the same graph cannot be differentiated twice.

Shape rules follow numpy: elementwise ops broadcast, ``matmul`` batches over
leading axes, reductions and normalizations act on the last axis unless an
axis is given.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Node",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "backward",
    "build_tape",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "index",
    "gather_rows",
    "relu",
    "softmax",
    "log",
    "exp",
    "mean",
    "total",
    "sum_axis",
    "l2_norm_rows",
    "layer_norm_stats",
    "pairwise_euclidean",
    "stop_gradient",
    "straight_through",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "apply_primitive",
]


class ShapeError(ValueError):
    """Input shapes violate an op's shape rule."""


class TapeError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, reused tape)."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "parents", "vjp", "consumed")

    def __init__(self, op: str, parents: tuple, vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.consumed = False

    def __repr__(self):
        return f"Node({self.op}, {len(self.parents)} inputs)"


class Tensor:
    """Dense float64 array with optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, node: Node) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = True
        t.grad = None
        t.node = node
        t.name = None
        return t

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
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor._from_op(data, Node(op, tuple(parents), vjp))
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record("mul", ad * bd, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input has non-positive entries")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


# -- linear algebra / structure ----------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape} vs {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def vjp(g):
        if bd.ndim == 2:
            # weight-matrix case: fold batch dims into one GEMM
            ga = g @ bd.T if a.requires_grad else None
            if ga is not None and ga.shape != ad.shape:
                ga = _unbroadcast(ga, ad.shape)
            gb = (ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
                  if b.requires_grad else None)
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record("concat", np.concatenate([t.data for t in ts], axis=ax), ts, vjp)


def index(a, key) -> Tensor:
    """Basic or advanced indexing (slice primitive)."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[key]

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _record("slice", np.array(out, copy=True), (a,), vjp)


def gather_rows(a, rows) -> Tensor:
    """``a[rows]`` along axis 0 for an integer index array of any shape."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < -a.shape[0] or rows.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _record("gather_rows", a.data[rows], (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {src} cannot broadcast to {tuple(shape)}") from None
    return _record("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, src),))


# -- reductions --------------------------------------------------------------


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record("sum_all", np.asarray(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean: empty tensor")
    shape, n = a.shape, a.size
    return _record("mean_all", np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def sum_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum_axis", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"softmax: empty last axis in shape {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), vjp)


def l2_norm_rows(a) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the zero vector."""
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=-1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, g / safe, 0.0)
        return (ad * coef[..., None],)

    return _record("l2_norm_rows", n, (a,), vjp)


def layer_norm_stats(a, eps: float = 1e-5) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` over the last axis (no affine)."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError(f"layer_norm: empty last axis in shape {a.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record("layer_norm_stats", y, (a,), vjp)


def pairwise_euclidean(a, b) -> Tensor:
    """Distances ``[..., n, m]`` between rows of ``[..., n, d]`` and ``[..., m, d]``.

    Computed from explicit differences so coincident points give exactly 0;
    their gradient contribution is 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_euclidean: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[..., :, None, :] - bd[..., None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def vjp(g):
        coef = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(ad * coef.sum(axis=-1)[..., None] - coef @ bd, ad.shape)
        if b.requires_grad:
            ct = np.swapaxes(coef, -1, -2)
            gb = _unbroadcast(bd * ct.sum(axis=-1)[..., None] - ct @ ad, bd.shape)
        return ga, gb

    return _record("pairwise_euclidean", dist, (a, b), vjp)


# -- gradient routing --------------------------------------------------------


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data)


def straight_through(hard, soft) -> Tensor:
    """Value of ``hard``; gradient flows wholly to ``soft``.

    Equivalent to ``hard + (soft - stop_gradient(soft))`` but returns the hard
    values bit for bit.
    """
    hard, soft = as_tensor(hard), as_tensor(soft)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return _record("straight_through", hard.data.copy(), (hard, soft), lambda g: (None, g))


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": scale,
    "matmul": matmul,
    "concat-last-dim": lambda *ts: concat(ts, axis=-1),
    "slice": index,
    "gather-rows": gather_rows,
    "relu": relu,
    "softmax-last-dim": softmax,
    "log": log,
    "exp": exp,
    "mean-all": mean,
    "sum-all": total,
    "sum-axis": sum_axis,
    "l2-norm-rows": l2_norm_rows,
    "layer-norm-stats": layer_norm_stats,
    "pairwise-euclidean": pairwise_euclidean,
    "stop-gradient": stop_gradient,
    "straight-through-combine": straight_through,
    "reshape": reshape,
    "swapaxes": swapaxes,
    "broadcast-to": broadcast_to,
}


def apply_primitive(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by its kind name, e.g. ``"softmax-last-dim"``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# -- backward ----------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in reversed(t.node.parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        # nothing upstream needs a gradient (e.g. every path is stop-gradient)
        return
    tape = build_tape(loss)
    for t in tape:
        if t.node is not None and t.node.consumed:
            raise TapeError("graph was already consumed by a previous backward")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        node = t.node
        if node is None:
            if g is not None:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + g
            continue
        node.consumed = True
        vjp, node.vjp = node.vjp, None
        if g is None:
            continue
        for p, pg in zip(node.parents, vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def numerical_grad(fn: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps Tensors (one per input array) to a scalar Tensor.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x, requires_grad=True) for x in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for arr, leaf in zip(arrays, leaves):
        def f():
            with no_grad():
                return fn(*[Tensor(x) for x in arrays]).item()
        num = numerical_grad(f, arr, step)
        worst = max(worst, max_rel_error(leaf.grad, num))
    return worst
