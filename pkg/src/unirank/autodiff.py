"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation produces a new :class:`Tensor`. When gradient recording is
enabled and at least one operand requires a gradient, the result keeps a
reference to its parents and a closure that maps the output gradient back onto
them. :func:`backward` walks the recorded graph in reverse topological order.

Broadcasting is deliberately narrow. Binary elementwise operations accept
operands of identical shape, a scalar against anything, or an operand whose
shape equals the trailing dimensions of the other (the matrix-vector case and
its batched generalisation). Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
_FLOP_COUNTER = None


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class FlopCounter:
    """Multiply-add count accumulated by :func:`matmul` inside :func:`count_flops`."""

    def __init__(self) -> None:
        self.macs = 0


@contextlib.contextmanager
def count_flops():
    global _FLOP_COUNTER
    prev = _FLOP_COUNTER
    counter = FlopCounter()
    _FLOP_COUNTER = counter
    try:
        yield counter
    finally:
        _FLOP_COUNTER = prev
        if prev is not None:
            prev.macs += counter.macs


def record_macs(n: int) -> None:
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.macs += int(n)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim >= 1 and small.ndim < big.ndim and big.shape[-small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported: ``(..., m, n) @ (n, p)`` with a shared right operand,
    ``(..., m, n) @ (..., n, p)`` with identical batch dimensions, and
    matrix-vector ``(..., m, n) @ (n,)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 1:
        if ad.ndim < 2 or ad.shape[-1] != bd.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
        out = ad @ bd
        record_macs(ad.size)

        def backward_vec(g):
            return g[..., None] * bd, ad.reshape(-1, bd.shape[0]).T @ g.reshape(-1)

        return _make(out, (a, b), backward_vec, "matmul")
    if ad.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, shapes {ad.shape} and {bd.shape}")
    out = ad @ bd
    record_macs(out.size * ad.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=ax),
        tuple(ts),
        lambda g: tuple(np.split(g, cuts, axis=ax)),
        "concat",
    )


def expand(a, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` ``n`` times along it."""
    a = as_tensor(a)
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), n, axis=ax)
    return _make(out, (a,), lambda g: (g.sum(axis=ax),), "expand")


def scatter_add_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[t]] += values[t]`` for every t, into an ``(n, ...)`` zero array."""
    out = np.zeros((n,) + values.shape[1:])
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward, "getitem")


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    flat = idx.reshape(-1)
    tail = a.shape[1:]
    return _make(
        a.data[idx],
        (a,),
        lambda g: (scatter_add_rows(flat, g.reshape((flat.size,) + tail), n),),
        "take_rows",
    )


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


# ---------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(np.asarray(a.data, dtype=np.float64).reshape(a.shape))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# fused reductions


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = softmax_np(a.data, axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = log_softmax_np(a.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain/bias shapes {gain.shape}, {bias.shape} vs input {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        gx = g * gd
        gin = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gin, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + bias.data, (a, gain, bias), backward, "layer_norm")


def l2_norm(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis))
    ad = a.data

    def backward(g):
        return (np.expand_dims(g / out, axis) * ad,)

    return _make(out, (a,), backward, "l2_norm")


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean length."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("l2_normalize: zero vector")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make(out, (a,), backward, "l2_normalize")


def pairwise_diff(a) -> Tensor:
    """``out[..., j, l] = a[..., l] - a[..., j]`` over the last axis."""
    a = as_tensor(a)
    ad = a.data
    out = ad[..., None, :] - ad[..., :, None]
    return _make(out, (a,), lambda g: (g.sum(axis=-2) - g.sum(axis=-1),), "pairwise_diff")


def _segment_starts(seg: np.ndarray, n_segments: int) -> np.ndarray:
    if seg.size == 0 or np.any(np.diff(seg) < 0) or seg[0] != 0 or seg[-1] != n_segments - 1 \
            or np.any(np.diff(seg) > 1):
        raise ValueError("segment ids must be sorted and cover 0..n_segments-1 without gaps")
    return np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])


def segment_softmax(a, segment_ids, n_segments: int) -> Tensor:
    """Softmax of a 1-D tensor within each contiguous segment."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"segment_softmax: expected 1-D input, got {a.shape}")
    seg = np.asarray(segment_ids, dtype=np.int64)
    starts = _segment_starts(seg, n_segments)
    mx = np.maximum.reduceat(a.data, starts)
    e = np.exp(a.data - mx[seg])
    out = e / np.add.reduceat(e, starts)[seg]

    def backward(g):
        dot = np.add.reduceat(g * out, starts)
        return (out * (g - dot[seg]),)

    return _make(out, (a,), backward, "segment_softmax")


def segment_sum(a, segment_ids, n_segments: int) -> Tensor:
    """Sum the rows of each contiguous segment; result has ``n_segments`` rows."""
    a = as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    starts = _segment_starts(seg, n_segments)
    out = np.add.reduceat(a.data, starts, axis=0)
    return _make(out, (a,), lambda g: (g[seg],), "segment_sum")


def scale_rows(a, w) -> Tensor:
    """Multiply row ``i`` of a 2-D tensor by the scalar ``w[i]``."""
    a, w = as_tensor(a), as_tensor(w)
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows: incompatible shapes {a.shape} and {w.shape}")
    ad, wd = a.data, w.data
    return _make(
        ad * wd[:, None], (a, w), lambda g: (g * wd[:, None], (g * ad).sum(axis=1)), "scale_rows"
    )


def sparse_matmul(m, a) -> Tensor:
    """Product of a constant ``scipy.sparse`` matrix with a dense tensor."""
    a = as_tensor(a)
    if m.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse_matmul: incompatible shapes {m.shape} and {a.shape}")
    mt = m.T.tocsr()
    return _make(np.asarray(m @ a.data), (a,), lambda g: (np.asarray(mt @ g),), "sparse_matmul")


# ---------------------------------------------------------------------------
# backward pass


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf that requires one.

    ``loss`` must be a scalar. When ``params`` is given, their gradients are
    returned in order, with zeros for parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    if params is None:
        return None
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check(f: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` takes one Tensor per array in ``point`` and returns a scalar Tensor.
    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    arrays = [np.array(p, dtype=np.float64, order="C") for p in (point if isinstance(point, (list, tuple)) else [point])]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = backward(f(*leaves), leaves)
    worst = 0.0
    for idx, base in enumerate(arrays):
        flat = base.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            with no_grad():
                up = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig - step
            with no_grad():
                down = f(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig
            num = (up - down) / (2.0 * step)
            err = abs(analytic[idx].reshape(-1)[j] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst


def is_finite(t: Tensor) -> bool:
    return bool(np.all(np.isfinite(t.data)))
