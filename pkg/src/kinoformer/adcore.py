"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every op computes its forward value eagerly and, when gradients are enabled
and some input requires them, records its inputs plus a closure mapping the
output gradient to input gradients.  ``backward`` walks the recorded graph in
reverse topological order and sums gradients at fan-out.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a trailing suffix of the other (a bias over leading
batch dimensions).  Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                arr = data
            else:
                arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Register a result node.

    ``backward(g)`` must return one gradient (or None) per parent, each shaped
    like that parent's data.
    """
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
        out.op = op
    else:
        out.op = op
    return out


def _bcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape, "add")
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape, "sub")
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return custom_op(ad * bd, (a, b), bw, "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if a.ndim != b.ndim and min(a.ndim, b.ndim) != 2:
        raise ShapeError(f"matmul: unsupported batch layout {a.shape} and {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if ga.shape != ad.shape:
                ga = _unbroadcast(ga, ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, m = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
                if gb.shape != bd.shape:
                    gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return custom_op(ad @ bd, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for i, t in enumerate(tensors):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(out)

    return custom_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def slice_(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return custom_op(np.array(a.data[idx]), (a,), bw, "slice")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two dimensions."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2-D, got {a.shape}")
    return custom_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    """Repeat ``a`` over new leading dimensions."""
    shape = tuple(shape)
    _bcast_shape(shape, a.shape, "broadcast_to")
    src = a.shape
    return custom_op(np.broadcast_to(a.data, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, src),), "broadcast_to")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return custom_op(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), bw, "mean")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log of a non-positive value")
    return custom_op(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return custom_op(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return custom_op(a.data * m, (a,), lambda g: (g * m,), "relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)
    return custom_op(y, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


def power(a: Tensor, p: float) -> Tensor:
    x = a.data
    p = float(p)
    return custom_op(x ** p, (a,), lambda g: (g * p * x ** (p - 1.0),), "power")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)
    return custom_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return custom_op(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd, gd = x.data, gain.data
    if gd.shape != xd.shape[-1:]:
        raise ShapeError(f"rmsnorm: gain shape {gd.shape} does not match last dim of {xd.shape}")
    ms = np.mean(xd * xd, axis=-1, keepdims=True) + eps
    if np.any(ms <= 0.0):
        raise NonFiniteError("rmsnorm: zero vector with eps=0")
    r = np.sqrt(ms)
    n = xd / r
    d = xd.shape[-1]

    def bw(g):
        gx = gg = None
        if x.requires_grad:
            gn = g * gd
            gx = gn / r - n * (gn * n).sum(axis=-1, keepdims=True) / (d * r)
        if gain.requires_grad:
            gg = (g * n).reshape(-1, d).sum(axis=0)
        return gx, gg

    return custom_op(n * gd, (x, gain), bw, "rmsnorm")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return custom_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution, x (B, C, H, W), w (O, C, kh, kw), b (O,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {xd.shape} and kernel {wd.shape}")
    kh, kw = wd.shape[2:]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.einsum("bchwij,ocij->bohw", cols, wd, optimize=True) + b.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.einsum("bohw,ocij->bchwij", g, wd, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j]
            gx = gxp[:, :, pad:pad + xd.shape[2], pad:pad + xd.shape[3]] if pad else gxp
        return gx, gw, gb

    return custom_op(out, (x, w, b), bw, "conv2d")


def mse(pred: Tensor, target) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._prev):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar loss.

    Leaf gradients are summed into ``leaf.grad`` (callers zero them between
    steps).  Returns a map from each reached leaf to the gradient added by
    this call.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._prev, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp
    return leaves


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-6,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    The error for one coordinate is |a - n| / max(1, |a|, |n|).  ``coords``
    restricts the comparison to a subset of flat indices.
    """
    x = np.array(x, dtype=np.float64)
    t = Tensor(x.copy(), requires_grad=True)
    backward(f(t))
    analytic = np.zeros_like(x) if t.grad is None else t.grad
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            xp, xm = flat.copy(), flat.copy()
            xp[i] += eps
            xm[i] -= eps
            fp = f(Tensor(xp.reshape(x.shape))).item()
            fm = f(Tensor(xm.reshape(x.shape))).item()
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: dict, eps: float = 1e-6,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` but perturbs parameter tensors in place.

    ``loss_fn`` must be deterministic.  With ``max_coords`` set, at most that
    many randomly chosen coordinates of each tensor are compared.
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p in params.values():
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = p.grad.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
