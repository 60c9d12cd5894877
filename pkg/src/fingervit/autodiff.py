"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine with exactly the operations a vision
transformer forward/backward pass needs. Tensors wrap contiguous
row-major arrays; every differentiable op records its parents and a
backward closure, and ``backward`` replays them in reverse topological
order. float32 is the training dtype, float64 the gradient-checking
dtype; both run through the same code path.

Broadcasting is supported where the transformer needs it (bias adds,
scalar ops, batched matmul against 2-D weights) via gradient
un-broadcasting; there is deliberately no fancier indexing or GPU path.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf_np

_GRAD_ENABLED = True
_CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / teacher passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_finite_checks(enabled: bool) -> None:
    """Opt-in NaN/Inf detection after every op (debug flag, costs a scan per op)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    """N-dimensional array node in the differentiation graph.

    Leaf tensors (parameters, inputs) are built directly; op results carry
    parent links and a backward closure. ``grad`` stays None until a
    backward pass reaches the tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient of the last backward pass; leaves unreachable from the loss get zeros."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    # -- operator sugar (constants are coerced at this tensor's dtype) --

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), bw, "neg")


def pow_const(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    data = a.data ** p

    def bw(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _result(data, (a,), bw, "pow")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics (operands must be >= 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires >=2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _result(data, (a, b), bw, "matmul")


# -- elementwise functions --


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        a._accumulate(g * data)

    return _result(data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        a._accumulate(g / a.data)

    return _result(data, (a,), bw, "log")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / data)

    return _result(data, (a,), bw, "sqrt")


def erf(a: Tensor) -> Tensor:
    data = _erf_np(a.data)
    if isinstance(data, np.ndarray) and data.dtype != a.data.dtype:
        data = data.astype(a.data.dtype)

    def bw(g):
        a._accumulate(g * (2.0 / math.sqrt(math.pi)) * np.exp(-a.data * a.data))

    return _result(data, (a,), bw, "erf")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input lies inside."""
    data = np.clip(a.data, lo, hi)

    def bw(g):
        mask = (a.data >= lo) & (a.data <= hi)
        a._accumulate(g * mask)

    return _result(data, (a,), bw, "clip")


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (mask is not differentiable)."""
    m = np.asarray(mask, dtype=bool)
    data = np.where(m, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(m, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(m, 0.0, g), b.shape))

    return _result(data, (a, b), bw, "where")


# -- reductions and shape ops --


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.ndim for ax in axes):
                gg = np.expand_dims(gg, ax)
        a._accumulate(np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=True))

    return _result(data, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    out = sum_(a, axis=axis, keepdims=keepdims)
    return mul(out, Tensor(np.asarray(1.0 / count, dtype=a.data.dtype)))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), bw, "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    data = np.swapaxes(a.data, ax1, ax2)

    def bw(g):
        a._accumulate(np.swapaxes(g, ax1, ax2))

    return _result(data, (a,), bw, "swapaxes")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape)

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _result(np.ascontiguousarray(data), (a,), bw, "broadcast_to")


def take(a: Tensor, key) -> Tensor:
    """Basic indexing/slicing; backward scatter-adds into the source shape."""
    data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accumulate(full)

    return _result(np.ascontiguousarray(data), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(start), int(stop))
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _result(data, parts, bw, "concat")


# -- fused neural-net ops --


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along `axis` (max subtraction before exponentiation)."""
    ax = axis if axis >= 0 else a.ndim + axis
    if ax < 0 or ax >= a.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if a.shape[ax] == 0:
        raise ValueError(f"softmax: empty extent along axis {axis} for shape {a.shape}")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        a._accumulate(y * (g - dot))

    return _result(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last axis {d}"
        )
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(Tensor(np.asarray(1.0, dtype=x.data.dtype)), sqrt(add(var, Tensor(np.asarray(eps, dtype=x.data.dtype)))))
    normed = mul(centered, inv)
    return add(mul(normed, gamma), beta)


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU, x * Phi(x); no tanh approximation."""
    phi = mul(add(erf(mul(x, Tensor(np.asarray(_INV_SQRT2, dtype=x.data.dtype)))),
                  Tensor(np.asarray(1.0, dtype=x.data.dtype))),
              Tensor(np.asarray(0.5, dtype=x.data.dtype)))
    return mul(x, phi)


# -- backward pass --


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss to every reachable leaf.

    Accumulates into ``.grad``; leaves the loss cannot reach keep
    ``grad=None``, which reads back as zeros via ``grad_or_zeros``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs at 64-bit regardless of the input dtype. The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: f returned non-finite value")
    backward(out)
    analytic = leaf.grad_or_zeros()

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            lo = f(Tensor(base.copy())).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise FloatingPointError("grad_check: f returned non-finite value at perturbed point")
            num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
