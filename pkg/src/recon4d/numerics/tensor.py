"""Dense tensors over numpy with reverse-mode automatic differentiation.

The graph is built dynamically as operations run. Each non-leaf tensor keeps
references to its parents and a closure mapping the output gradient to one
gradient per parent. ``Tensor.backward`` walks the graph in reverse
topological order.

Broadcasting is deliberately restricted: two operands must either have equal
shapes or the shape of one must be a trailing suffix of the other (expansion
along leading axes only). Anything else raises :class:`ShapeError`; use
:func:`broadcast_to` to expand explicitly.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

_DEFAULT_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype (``np.float64`` for gradient checks)."""
    prev = _DEFAULT_DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = prev


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data
    return np.asarray(data, dtype=get_default_dtype())


class Tensor:
    """An n-dimensional array that records operations for differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data.data if isinstance(data, Tensor) else data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        needs = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array protocol -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``.

        Leaves accumulate across calls; intermediate tensors hold the gradient
        of the most recent pass.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        topo = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if not node.requires_grad:
                continue
            if g is None:
                g = np.zeros_like(node.data)
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise AssertionError(f"gradient shape {pg.shape} != {parent.data.shape}")
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _lift(a, b) -> tuple[Tensor, Tensor]:
    """Convert operands to tensors; bare scalars take the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- shape rules ---------------------------------------------------------------
def _result_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"incompatible shapes {sa} and {sb} (only leading-axis expansion is allowed)")


def _unexpand(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


# -- elementwise binary ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unexpand(g, sa), _unexpand(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unexpand(g, sa), -_unexpand(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unexpand(g * bd, ad.shape) if a.requires_grad else None,
            _unexpand(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unexpand(g / bd, ad.shape) if a.requires_grad else None,
            _unexpand(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if p == 2:
        return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return Tensor._make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    return power(a, 2)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        lead = len(shape) - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return Tensor._make(out, (a,), bw)


# -- elementwise unary -----------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (0.5 * g / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """ln(1 + e^x), computed as logaddexp(0, x) so large |x| is safe."""
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    return Tensor._make(out, (a,), lambda g: (g * _sigmoid(ad),))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; the gradient passes only where the input was inside the range."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    keep = out == ad
    return Tensor._make(out, (a,), lambda g: (g * keep,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    mask = ad > 0
    return Tensor._make(ad * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), bw)


# -- reductions ------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axes, keepdims) * (1.0 / max(n, 1))


def reduce_max_data(a: Tensor, axis=-1) -> np.ndarray:
    return a.data.max(axis=axis)


# -- shape ops ---------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise ShapeError(f"cannot reshape {src} into {shape}")
    return Tensor._make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat shape mismatch {ts[0].shape} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return Tensor._make(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack shape mismatch {ts[0].shape} vs {t.shape}")
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    ax = axis % out.ndim
    return Tensor._make(out, ts, lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    """Slicing and integer-array indexing; fancy indices scatter-add on backward."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True) if basic else out, (a,), bw)


def slice_(a, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * as_tensor(a).ndim
    index[axis] = slice(start, stop)
    return getitem(a, tuple(index))


def embedding_lookup(table, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding id out of range")
    return getitem(table, ids)


def index_update(a, rows, values) -> Tensor:
    """Functional ``a[rows] = values`` for unique integer ``rows`` along axis 0."""
    a, values = as_tensor(a), as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    if len(np.unique(rows)) != len(rows):
        raise ContractError("index_update rows must be unique")
    if values.shape != (len(rows),) + a.shape[1:]:
        raise ShapeError(f"values {values.shape} do not fit rows of {a.shape}")
    out = a.data.copy()
    out[rows] = values.data

    def bw(g):
        ga = g.copy()
        ga[rows] = 0
        return ga, g[rows]

    return Tensor._make(out, (a, values), bw)


# -- linear algebra ----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Batch axes must match, or one operand is a plain 2-D matrix that is
    expanded along the other's batch axes.
    """
    a, b = _lift(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        raise ShapeError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unexpand(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unexpand(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), bw)


def inv(a) -> Tensor:
    """Batched matrix inverse over the last two axes."""
    a = as_tensor(a)
    out = np.linalg.inv(a.data)

    def bw(g):
        ot = np.swapaxes(out, -1, -2)
        return (-(ot @ g @ ot),)

    return Tensor._make(out, (a,), bw)


# -- normalisation / attention -------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), bw)


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        return (rstd * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = Tensor._make(xhat, (a,), bw)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


NEG_INF = -1e9


def scaled_dot_product_attention(q, k, v, mask=None, scale: float | None = None) -> Tensor:
    """softmax(q kᵀ · scale + mask) v over the last two axes.

    ``mask`` is additive (0 keeps a pair, a large negative value removes it)
    with shape (Nq, Nk); it is expanded over any leading batch/head axes.
    The backward pass is fused: only the attention probabilities are kept.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = (qd @ np.swapaxes(kd, -1, -2)) * scale
    if mask is not None:
        m = np.asarray(mask, dtype=s.dtype)
        if m.shape != s.shape[-2:]:
            raise ShapeError(f"mask shape {m.shape} != {s.shape[-2:]}")
        s = s + m
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s
    out = p @ vd

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ kd) * scale
        gk = (np.swapaxes(gs, -1, -2) @ qd) * scale
        return gq, gk, gv

    return Tensor._make(out, (q, k, v), bw)


def attention_chunked(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, chunk: int = 2048) -> np.ndarray:
    """Inference-only attention that bounds memory by chunking queries."""
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=v.dtype)
    kt = np.swapaxes(k, -1, -2)
    for lo in range(0, q.shape[-2], chunk):
        s = (q[..., lo:lo + chunk, :] @ kt) * scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[..., lo:lo + chunk, :] = s @ v
    return out
