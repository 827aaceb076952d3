"""Dense float64 tensors with reverse-mode automatic differentiation.

The op vocabulary is deliberately small: it covers exactly what the
generators, the losses and the flow-matching baseline need.

Every op builds its output with :func:`_node`, which records the parents and
a closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks the graph once in reverse topological order,
accumulates gradients additively across fan-out, stores them on leaf tensors
created with ``requires_grad=True`` and then frees the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "mish",
    "softplus",
    "matmul",
    "conv1d",
    "group_norm",
    "softmax_rows",
    "concat",
    "upsample_nearest",
    "reshape",
    "permute",
    "expand",
    "sum",
    "mean",
    "stop_gradient",
    "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    # operator sugar
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self) -> Tensor:
        return permute(self, tuple(reversed(range(self.ndim))))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not identical and neither is a scalar")
    return a, b


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    # reduce a gradient back onto a scalar operand
    if like.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_fit(g * bd, a), _fit(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), lambda g: (_fit(g / bd, a), _fit(-g * out / bd, b)), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _node(_softplus_np(ad), (a,), lambda g: (g * _sigmoid_np(ad),), "softplus")


def mish(a) -> Tensor:
    """x * tanh(softplus(x)) with a log1p-based softplus."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_softplus_np(x))
    out = x * t

    def grad_fn(g):
        return (g * (t + x * (1.0 - t * t) * _sigmoid_np(x)),)

    return _node(out, (a,), grad_fn, "mish")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def expand(a, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` along its size-1 axes to ``shape`` (ranks must match)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.broadcast_to(a.data, shape)

    def grad_fn(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(out, (a,), grad_fn, "expand")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _node(out, ts, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _node(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def stop_gradient(a) -> Tensor:
    """Same values as ``a``; nothing flows back through the result."""
    a = _as_tensor(a)
    return Tensor(a.data.copy())


# ---------------------------------------------------------------------------
# network ops


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (a,), grad_fn, "softmax_rows")


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """Zero-padded cross-correlation over the last axis.

    ``x`` is ``(C_in, T)`` or ``(B, C_in, T)``, ``w`` is ``(C_out, C_in, K)``
    with odd ``K`` and padding ``K // 2`` (so kernel 5 pads by 2), ``b`` is
    ``(C_out,)``. Output length is ``ceil(T / stride)``.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"conv1d: stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.ndim != 3 or w.shape[1] != xd.shape[1] or w.shape[2] % 2 != 1:
        raise ShapeError(f"conv1d: input {x.shape} incompatible with kernel {w.shape}")
    if xd.shape[2] < 1:
        raise ShapeError("conv1d: empty sequence")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv1d: bias {b.shape} does not match {w.shape[0]} output channels")
    k = w.shape[2]
    pad = k // 2
    n, _, t = xd.shape
    t_out = -(-t // stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :t_out]
    wd = w.data
    out = np.einsum("bctk,ock->bot", cols, wd, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None]
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g3 = g[None] if squeeze else g
        gw = np.einsum("bctk,bot->ock", cols, g3, optimize=True)
        gcols = np.einsum("ock,bot->bctk", wd, g3, optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[..., j]
        gx = gxp[:, :, pad : pad + t]
        if squeeze:
            gx = gx[0]
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g3.sum(axis=(0, 2)),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, grad_fn, "conv1d")


def group_norm(x, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize each group of channels over (channels-in-group x time).

    Accepts ``(C, T)`` or ``(B, C, T)``. No affine parameters; FiLM supplies
    the per-channel scale and shift.
    """
    x = _as_tensor(x)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"group_norm expects (C, T) or (B, C, T), got {x.shape}")
    n, c, t = xd.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = xd.reshape(n, groups, -1)
    # shifting by the first element makes constant groups centre to exact zeros
    ref = xg[:, :, :1]
    centered = (xg - ref) - (xg - ref).mean(axis=2, keepdims=True)
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat.reshape(xd.shape)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gg = (g[None] if squeeze else g).reshape(n, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        gx = gx.reshape(xd.shape)
        return (gx[0] if squeeze else gx,)

    return _node(out, (x,), grad_fn, "group_norm")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Repeat each time step ``factor`` times along the last axis."""
    x = _as_tensor(x)
    out = np.repeat(x.data, factor, axis=-1)

    def grad_fn(g):
        return (g.reshape(g.shape[:-1] + (-1, factor)).sum(axis=-1),)

    return _node(out, (x,), grad_fn, "upsample")


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))
