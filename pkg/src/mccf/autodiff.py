"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together
with a closure that maps the output gradient to input gradients.  Outside
a tape the same functions run as plain numpy code, which is what
evaluation uses.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = dot(w, Tensor([2.0, 3.0]))
    >>> backward(tape, loss)[w.node_id]
    array([2., 3.])
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_node_ids = itertools.count(1)
_active: list["Tape"] = []


class Tensor:
    """Dense float64 array that can take part in a differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".rstrip())
        if any(d == 0 for d in arr.shape):
            raise ContractError(f"zero-sized dimension in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t.node_id = next(_node_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def as_tensor(x) -> Tensor:
    return _lift(x)


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the operations needed for a backward pass.

    A tape belongs to one thread at a time; nesting tapes is not supported.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if _active:
            raise ContractError("a tape is already active")
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.pop()

    def record(self, kind, inputs, output, fn) -> None:
        self.entries.append(TapeEntry(kind, tuple(inputs), output, fn))


def recording() -> bool:
    return bool(_active)


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{kind} produced a non-finite value")
    out = Tensor._wrap(data)
    if _active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _active[-1].record(kind, inputs, out, fn)
    return out


def _check_finite(*ts: Tensor) -> None:
    for t in ts:
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite input {t!r}")


def backward(tape: Tape, loss: Tensor, keep_intermediate: bool = False) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) backwards through ``tape``.

    Returns a map from node id to gradient array.  Leaf tensors with
    ``requires_grad`` also get their ``.grad`` attribute set.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    result: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        produced.add(entry.output.node_id)
        g = grads.pop(entry.output.node_id, None)
        if g is None:
            continue
        if keep_intermediate:
            result[entry.output.node_id] = g
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            grads[t.node_id] = gi if prev is None else prev + gi
            leaves.setdefault(t.node_id, t)
    for nid, g in grads.items():
        if nid in produced:
            continue
        result[nid] = g
        t = leaves.get(nid)
        if t is not None:
            t.grad = g
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = a.data
    if floor is not None:
        live = x > floor
        xc = np.where(live, x, floor)
        return _emit("log", np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),))
    if (x <= 0).any():
        raise NumericError("log of a non-positive value")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), fn)


def square_sum(a: Tensor) -> Tensor:
    """Sum of squared entries (used for weight decay)."""
    x = a.data
    return _emit("square_sum", np.asarray(np.vdot(x, x)), (a,), lambda g: (2.0 * g * x,))


def sum_of_squares(tensors: Sequence[Tensor]) -> Tensor:
    """Total of squared entries over many tensors, recorded as one op."""
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    total = float(sum(np.vdot(d, d) for d in datas))
    return _emit("sum_of_squares", np.asarray(total), tensors,
                 lambda g: tuple(2.0 * g * d for d in datas))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: expected equal 1-d shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit("dot", np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(lead + (wd.shape[1],))

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, fn)


def sparse_matmul(a, x: Tensor) -> Tensor:
    """Constant scipy sparse matrix times a dense tensor."""
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_matmul: {a.shape} vs {x.shape}")
    at = a.T.tocsr()
    return _emit("sparse_matmul", np.asarray(a @ x.data), (x,), lambda g: (np.asarray(at @ g),))


# ---------------------------------------------------------------- shape


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[x.shape for x in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    shape = a.shape

    def fn(g):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)

    return _emit("index", np.array(a.data[key]), (a,), fn)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[ax]}")
    parts, start = [], 0
    for s in sizes:
        key = [slice(None)] * a.ndim
        key[ax] = slice(start, start + s)
        parts.append(index(a, tuple(key)))
        start += s
    return parts


def gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("gather ids must be integers")
    n, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"gather: id out of range [0, {n})")

    def fn(g):
        z = np.zeros((n, d))
        np.add.at(z, ids.reshape(-1), g.reshape(-1, d))
        return (z,)

    return _emit("gather", table.data[ids], (table,), fn)


# ---------------------------------------------------------------- normalisers


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax; positions where ``mask`` is False get exactly zero weight."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax: a row is fully masked")
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return _emit("softmax", y, (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax; masked positions are excluded and report 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("log_softmax: a row is fully masked")
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = xm.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xm - m).sum(axis=axis, keepdims=True))
    p = np.exp(xm - lse)
    y = x - lse if mask is None else np.where(mask, x - lse, 0.0)

    def fn(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", y, (a,), fn)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if (n == 0).any():
        raise NumericError("l2_normalize: zero-norm vector")
    y = x / n
    return _emit("l2_normalize", y, (a,),
                 lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data

    def fn(g):
        gh = g * gd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), fn)


# ---------------------------------------------------------------- dispatch

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "concat": concat,
    "relu": relu,
    "softmax": softmax,
    "mean": mean,
    "scale": scale,
    "l2_normalize": l2_normalize,
    "dot": dot,
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply a named primitive.  ``concat`` takes its inputs as one list;
    ``scale`` expects ``factor=`` in kwargs."""
    if kind not in _PRIMITIVES:
        raise ContractError(f"unknown primitive {kind!r}")
    _check_finite(*inputs)
    if kind == "concat":
        return concat(inputs, **kwargs)
    if kind == "scale":
        return scale(inputs[0], kwargs["factor"])
    return _PRIMITIVES[kind](*inputs, **kwargs)


# ---------------------------------------------------------------- checking


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
                      max_entries: int | None = None, seed: int = 0) -> float:
    """Max over checked entries of |analytic - central| / max(1, |central|).

    ``f`` re-evaluates the scalar objective from the current contents of
    ``params``.  With ``max_entries`` only that many randomly chosen entries
    of each parameter are perturbed.
    """
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads.get(p.node_id, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
