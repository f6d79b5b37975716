"""Minimal numpy-backed tensors with reverse-mode automatic differentiation.

Only the op set needed by the encoder and the SSL objectives is provided.
Values are float32 by default; reductions accumulate in float64.  Inside
``precision(np.float64)`` every new tensor is created in double precision,
which is what the finite-difference checker uses.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import InputError, NumericalError

_DTYPE = np.float32
_GRAD_ENABLED = True

LAYER_NORM_EPS = 1e-6


class ShapeError(InputError):
    pass


class DomainError(NumericalError, ValueError):
    pass


class NonFiniteError(NumericalError, FloatingPointError):
    pass


@contextlib.contextmanager
def precision(dtype):
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if not float(p).is_integer() and np.any(a.data < 0):
        raise DomainError("power: fractional power of negative value")
    out = a.data ** p
    _check_finite(out, "power")

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), bw, "power")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        return (_unbroadcast(np.where(cond, g, 0), a.shape),
                _unbroadcast(np.where(cond, 0, g), b.shape))

    return _make(out.astype(np.result_type(a.data, b.data)), (a, b), bw, "where")


# elementwise unary -------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    _check_finite(out, "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make(out, (a,), bw, "sqrt")


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = (x * cdf).astype(x.dtype)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _make(out, (a,), bw, "gelu")


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


# reductions --------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def logsumexp(a, axis: int = -1, mask=None, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; entries where ``mask`` is False are excluded."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise DomainError("logsumexp: a reduced slice is fully masked")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    w = (e / s).astype(a.data.dtype)
    res = out if keepdims else np.squeeze(out, axis=axis)

    def bw(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * w,)

    return _make(res.astype(a.data.dtype), (a,), bw, "logsumexp")


# normalisation / activations -------------------------------------------


def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    if temperature <= 0:
        raise DomainError("softmax: temperature must be positive")
    x = a.data / temperature
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(a.data.dtype)

    def bw(g):
        inner = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64)
        return (((g - inner) * out / temperature).astype(a.data.dtype),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    if temperature <= 0:
        raise DomainError("log_softmax: temperature must be positive")
    x = a.data.astype(np.float64) / temperature
    m = x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    out = x - lse
    p = np.exp(out)

    def bw(g):
        gs = g.sum(axis=axis, keepdims=True, dtype=np.float64)
        return (((g - p * gs) / temperature).astype(a.data.dtype),)

    return _make(out.astype(a.data.dtype), (a,), bw, "log_softmax")


def batch_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise each feature (last axis) over all leading axes with batch statistics."""
    a = as_tensor(a)
    shape = a.shape
    x = a.data.reshape(-1, shape[-1]).astype(np.float64)
    if x.shape[0] < 2:
        raise ShapeError(f"batch_norm needs at least 2 rows, got {x.shape[0]}")
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dt = a.data.dtype

    def bw(g):
        g = g.reshape(-1, shape[-1]).astype(np.float64)
        gm = g.mean(axis=0, keepdims=True)
        gx = (g * xhat).mean(axis=0, keepdims=True)
        return ((inv * (g - gm - xhat * gx)).reshape(shape).astype(dt),)

    y = _make(xhat.reshape(shape).astype(dt), (a,), bw, "batch_norm")
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def layer_norm(a, weight=None, bias=None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dt = a.data.dtype

    def bw(g):
        g = g.astype(np.float64)
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((inv * (g - gm - xhat * gx)).astype(dt),)

    y = _make(xhat.astype(dt), (a,), bw, "layer_norm")
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    raw = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    clamped = raw < eps
    n = np.maximum(raw, eps)
    y = x / n
    dt = a.data.dtype

    def bw(g):
        g = g.astype(np.float64)
        proj = np.where(clamped, 0.0, (g * y).sum(axis=axis, keepdims=True))
        return (((g - y * proj) / n).astype(dt),)

    return _make(y.astype(dt), (a,), bw, "l2_normalize")


def cosine_similarity(a, b) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` (n×d) and ``b`` (m×d)."""
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def pairwise_sq_dist(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_sq_dist: feature dims differ {a.shape} vs {b.shape}")
    aa = sum_(a * a, axis=-1, keepdims=True)
    bb = transpose(sum_(b * b, axis=-1, keepdims=True))
    return aa + bb - 2.0 * matmul(a, transpose(b))


# backward ----------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if not root.requires_grad:
        raise RuntimeError("backward() called on a tensor that does not require grad")
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"backward: implicit gradient needs a scalar, got {root.shape}")
        grad = np.ones_like(root.data)
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# finite-difference gradient check ---------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    subset: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``x`` with central differences.

    Runs in float64.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    ``subset`` limits the finite differences to that many seeded coordinates;
    unchecked coordinates are reported as NaN in ``numeric``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(x0, requires_grad=True)
        y = f(xt)
        if y.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {y.shape}")
        if not np.isfinite(y.data).all():
            raise NonFiniteError("grad_check: f(x) is not finite")
        if y.requires_grad:
            y.backward()
        analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)

        numeric = np.full_like(x0, np.nan)
        flat = x0.reshape(-1)
        num_flat = numeric.reshape(-1)
        coords = np.arange(flat.size)
        if subset is not None and subset < flat.size:
            coords = np.sort(np.random.default_rng(seed).choice(flat.size, subset, replace=False))
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(Tensor(x0)).data)
                flat[i] = orig - eps
                fm = float(f(Tensor(x0)).data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("grad_check: f is not finite near x")
                num_flat[i] = (fp - fm) / (2 * eps)

    a, n = analytic.reshape(-1)[coords], num_flat[coords]
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel < tol, analytic, numeric)
