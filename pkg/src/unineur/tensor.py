"""Dense float64 tensors with reverse-mode autodiff over a small fixed op set.

Every op returns a new :class:`Tensor`.  When any input requires grad, the
result records its parents and a backward closure; nodes are numbered in
creation order, so reverse creation order is a valid topological order for
the backward sweep.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Incompatible shapes."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """NaN (or another non-representable value) reached an op that forbids it."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._id = next(_counter)
        t.name = None
        return t

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor._wrap(arr)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _sum_to_suffix(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; ``b`` may match a trailing suffix of ``a``'s shape (bias add)."""
    _check_suffix(a, b, "add")
    bshape = b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (g, _sum_to_suffix(g, bshape) if b.requires_grad else None))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    bshape = b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (g, -_sum_to_suffix(g, bshape) if b.requires_grad else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    ad, bd, bshape = a.data, b.data, b.shape
    return _result(ad * bd, (a, b),
                   lambda g: (g * bd if a.requires_grad else None,
                              _sum_to_suffix(g * ad, bshape) if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n) or (..., m, k) @ (..., k, n) with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise DimensionError(f"slice: [{start}:{stop}) out of range for axis of size {a.shape[ax]}")
    idx = [np.s_[:]] * a.ndim
    idx[ax] = np.s_[start:stop]
    idx = tuple(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), bw)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    ax = axis % (a.ndim + 1)
    out = np.repeat(np.expand_dims(a.data, ax), n, axis=ax)
    return _result(out, (a,), lambda g: (g.sum(axis=ax),))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _result(a.data.sum(axis=ax), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- nn pieces

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; a row that is entirely -inf maps to zeros."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax: NaN in input")
    if axis >= a.ndim or axis < -a.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    if a.shape[-1] < 2:
        raise DimensionError("layer_norm: last axis must have length >= 2")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xh).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xh * gx),)

    return _result(xh, (a,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    k = d.size
    return _result(np.asarray((d**2).mean()), (a, b),
                   lambda g: (g * 2.0 / k * d, -g * 2.0 / k * d))


def rope(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (2k, 2k+1) by per-position angles.

    ``cos``/``sin`` have shape (L, d/2) and broadcast over leading axes of
    ``a`` (..., L, d).
    """
    x = a.data
    if x.shape[-1] != 2 * cos.shape[-1] or x.shape[-2] != cos.shape[0]:
        raise DimensionError(f"rope: input {x.shape} vs angle table {cos.shape}")

    def rot(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    return _result(rot(x, sin), (a,), lambda g: (rot(g, -sin),))


def unfold1d(a: Tensor, kernel: int, stride: int) -> Tensor:
    """im2col for 1-D convolution: (B, C, W) -> (B, W_out, C*kernel), no padding."""
    B, C, W = a.shape
    if W < kernel:
        raise DimensionError(f"unfold1d: length {W} shorter than kernel {kernel}")
    w_out = (W - kernel) // stride + 1
    idx = np.arange(w_out)[:, None] * stride + np.arange(kernel)[None, :]
    cols = a.data[:, :, idx]                       # B, C, w_out, k
    out = cols.transpose(0, 2, 1, 3).reshape(B, w_out, C * kernel)

    def bw(g):
        gc = g.reshape(B, w_out, C, kernel).transpose(0, 2, 1, 3)
        full = np.zeros((B, C, W))
        np.add.at(full, (slice_all, slice_all, idx), gc)
        return (full,)

    return _result(out, (a,), bw)


slice_all = np.s_[:]


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
