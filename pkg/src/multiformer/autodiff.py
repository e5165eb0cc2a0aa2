"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: just enough operations to express
convolutional tokenization, multi-head attention, layer norm, and the
training losses, each paired with an analytic backward rule. float32 is
the training dtype; gradient checks rebuild the same graph in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import ContractError, DeterminismError, NumericError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-dimensional value node in the differentiation graph.

    ``data`` is a row-major numpy array; ``grad``, once populated by
    :func:`backward`, has the same shape. Tensors produced by operations
    keep references to their parents and a backward rule; leaves have
    neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn)


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)

    def backward_fn(g):
        return (g * s,)

    return _result(x.data * x.dtype.type(s), (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        ok = len(t.shape) == len(first) and all(
            t.shape[i] == first[i] for i in range(len(first)) if i != axis % len(first)
        )
        if not ok:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {first} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for t, p in zip(tensors, pieces))

    return _result(data, tensors, backward_fn)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    old = x.shape

    def backward_fn(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), backward_fn)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")

    def backward_fn(g):
        return (g.T,)

    return _result(x.data.T.copy(), (x,), backward_fn)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis``."""
    x = _as_tensor(x)
    extent = x.shape[axis]
    if start < 0 or length < 1 or start + length > extent:
        raise ShapeError(f"narrow: [{start}:{start + length}) outside extent {extent} of shape {x.shape}")
    index = tuple(slice(None) if i != axis % x.data.ndim else slice(start, start + length) for i in range(x.data.ndim))

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _result(x.data[index].copy(), (x,), backward_fn)


def sum_all(x) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = _as_tensor(x)
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")

    def backward_fn(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward_fn)


def conv2d(x, filters, stride: int = 1) -> Tensor:
    """Valid cross-correlation of an h*w*cin image with k*k*cin*cout filters."""
    x, filters = _as_tensor(x), _as_tensor(filters)
    if x.data.ndim != 3 or filters.data.ndim != 4:
        raise ShapeError(f"conv2d: expected image h*w*cin and filters k*k*cin*cout, got {x.shape}, {filters.shape}")
    h, w, cin = x.shape
    k, k2, fcin, cout = filters.shape
    if k != k2:
        raise ShapeError(f"conv2d: filters must be square, got {filters.shape}")
    if fcin != cin:
        raise ShapeError(f"conv2d: channel mismatch, image {x.shape} vs filters {filters.shape}")
    if k > h or k > w:
        raise ShapeError(f"conv2d: filter {k}x{k} larger than input {h}x{w}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be positive, got {stride}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1

    windows = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(0, 1))
    # (oh, ow, cin, k, k) -> rows ordered to match the (k, k, cin) filter layout
    col = windows[::stride, ::stride].transpose(0, 1, 3, 4, 2).reshape(oh * ow, k * k * cin)
    wmat = filters.data.reshape(k * k * cin, cout)
    out = (col @ wmat).reshape(oh, ow, cout)

    def backward_fn(g):
        g2 = g.reshape(oh * ow, cout)
        gf = (col.T @ g2).reshape(k, k, cin, cout) if filters.requires_grad else None
        gx = None
        if x.requires_grad:
            gcol = (g2 @ wmat.T).reshape(oh, ow, k, k, cin)
            gx = np.zeros_like(x.data)
            for i in range(k):
                for j in range(k):
                    gx[i : i + oh * stride : stride, j : j + ow * stride : stride, :] += gcol[:, :, i, j, :]
        return gx, gf

    return _result(out, (x, filters), backward_fn)


def mean_pool_spatial(x) -> Tensor:
    """Mean over the two spatial axes of an h*w*c map, yielding a c-vector."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"mean_pool_spatial: expected h*w*c, got {x.shape}")
    h, w, _ = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype, copy=True),)

    return _result(x.data.mean(axis=(0, 1)), (x,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the elementwise affine.

    Uses the population standard deviation; ``eps`` sits inside the
    square root so zero-variance rows stay finite.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last axis has zero extent")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be > 0, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def backward_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=reduce_axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(y, (x, gamma, beta), backward_fn)


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF gelu: x * Phi(x), with Phi from erf."""
    x = _as_tensor(x)
    inv_sqrt2 = x.dtype.type(1.0 / math.sqrt(2.0))
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) / x.dtype.type(math.sqrt(2.0 * math.pi))
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the differentiable subgraph: inputs before outputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate additively across fan-out within the graph and
    across repeated calls (callers clear with :func:`zero_grads`). Each
    operation's backward rule runs exactly once, in reverse topological
    order.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            flowing[key] = pg if key not in flowing else flowing[key] + pg


def zero_grads(tensors) -> None:
    values = tensors.values() if isinstance(tensors, Mapping) else tensors
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    eps: float
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def passes(self, tol: float) -> bool:
        return all(e.max_rel_err < tol for e in self.entries)

    def failures(self, tol: float) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.max_rel_err < tol]


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic (it is evaluated twice up front and the
    values compared bit-for-bit) and return a scalar tensor. Relative
    error per entry is |analytic - numeric| / max(|analytic|, |numeric|,
    1e-12). Run with float64 parameters; float32 differences are too
    noisy for tight tolerances.
    """
    if eps <= 0:
        raise ContractError(f"grad_check: eps must be > 0, got {eps}")
    first = f(params)
    second = f(params)
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError("grad_check: repeated evaluations differ; f must be deterministic")

    zero_grads(params)
    backward(first)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()
    }

    entries = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(params).data)
            flat[i] = orig - eps
            fm = float(f(params).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        ana = analytic[name].reshape(-1).astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-12)
        rel = np.abs(ana - numeric) / denom
        entries.append(GradCheckEntry(name=name, max_rel_err=float(rel.max()), checked=int(flat.size)))
    return GradCheckReport(eps=eps, entries=entries)
