"""Dense tensors with reverse-mode automatic differentiation.

Small float32 op set sufficient for a desk-scale transformer: matmul,
elementwise arithmetic, softmax, layer norm, activations, reductions,
gather, concat/slice/reshape, L2 normalization. Every op records a
backward rule; `backward()` walks the recorded graph once in reverse
topological order. Gradients accumulate additively, so running backward
twice without clearing doubles the leaf gradients.

Broadcasting is restricted to numpy prepend-style expansion (leading
batch dims, or explicit singleton axes); anything else needs an explicit
reshape.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

_seq_counter = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class NondeterministicFunctionError(RuntimeError):
    """Raised when a function handed to a gradient check is not repeatable."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_default_dtype(dtype) -> None:
    """Switch the buffer dtype (float32 by default; float64 for test rigs)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype


def _check_finite(data: np.ndarray, op: str) -> None:
    # float64 accumulation: any NaN/Inf in float32 data poisons the sum
    if not np.isfinite(np.sum(data, dtype=np.float64)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """n-dimensional value, optionally carrying a gradient and a graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"
        self._seq = next(_seq_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant view of the same buffer; gradients stop here."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars allowed where noted
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor/tensor division not in the op set; use mul + reciprocal ops")

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq_counter)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _check_broadcast(sa: tuple, sb: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise DimensionError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast up from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn, "add")


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_broadcast(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * np.asarray(c, dtype=a.data.dtype)

    def backward_fn(g):
        return (g * c,)

    return _make(out_data, (a,), backward_fn, "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2], "matmul(batch dims)")
    out_data = a.data @ b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _make(out_data, (a, b), backward_fn, "matmul")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    out_data = np.transpose(a.data, axes)

    def backward_fn(g):
        return (np.transpose(g, inv),)

    return _make(out_data, (a,), backward_fn, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make(out_data, (a,), backward_fn, "reshape")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out_data, tuple(tensors), backward_fn, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[axis]):
        raise DimensionError(f"slice: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out_data, (a,), backward_fn, "slice")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of `table` indexed by an integer array."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"gather: id out of range [0, {table.shape[0]}), got min={ids.min()} max={ids.max()}")
    out_data = table.data[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, *table.shape[1:]))
        return (gt,)

    return _make(out_data, (table,), backward_fn, "gather")


# ---------------------------------------------------------------------------
# nonlinearities

def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    return _make(out_data, (a,), backward_fn, "softmax")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _make(out_data, (a,), backward_fn, "log")


def clip(a: Tensor, lo: float | None, hi: float | None) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def backward_fn(g):
        return (g * inside,)

    return _make(out_data, (a,), backward_fn, "clip")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward_fn(g):
        return (g * (a.data > 0),)

    return _make(out_data, (a,), backward_fn, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g):
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), backward_fn, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), backward_fn, "tanh")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * local,)

    return _make(out_data, (a,), backward_fn, "gelu")


# ---------------------------------------------------------------------------
# reductions and normalizations

def sum_(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out_data, (a,), backward_fn, "sum")


def mean(a: Tensor, axis: int | tuple | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.shape != (a.shape[-1],) or bias.shape != (a.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} must match last dim of {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gain.data * xhat + bias.data

    def backward_fn(g):
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(a.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return (dx.astype(a.data.dtype, copy=False), dgain, dbias)

    return _make(out_data, (a, gain, bias), backward_fn, "layer_norm")


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit L2 norm."""
    s = (a.data * a.data).sum(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(s + eps)
    out_data = a.data * inv

    def backward_fn(g):
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        return (inv * g - (inv ** 3) * dot * a.data,)

    return _make(out_data, (a,), backward_fn, "l2_normalize")


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep, dtype=a.data.dtype))


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(root: Tensor) -> list[Tensor]:
    """All ancestors of `root`, parents strictly before children."""
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires-grad ancestor of a scalar loss.

    Gradients add into any existing `.grad`, so repeated calls accumulate.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topo_order(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in flowing:
                flowing[pid] = flowing[pid] + pg
            else:
                flowing[pid] = pg


# ---------------------------------------------------------------------------
# gradient verification

def finite_difference_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max elementwise relative error between analytic and central-difference
    gradients of a scalar-valued `f` at `x`.

    Relative error per element: |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with no_grad():
        one = float(f(x).data)
        two = float(f(x).data)
    if one != two:
        raise NondeterministicFunctionError("f(x) returned different values on repeat evaluation")

    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            hi = float(f(x).data)
        flat[i] = orig - eps
        with no_grad():
            lo = float(f(x).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)

    a = analytic.astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


def directional_gradient_check(f, x: Tensor, eps: float = 1e-3,
                               direction: np.ndarray | None = None) -> float:
    """Relative error of the directional derivative of scalar `f` along
    the analytic gradient direction (or a supplied unit direction).

    Well conditioned even for large parameter tensors: the probe compares
    g.v against a two-point central difference along v.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.grad = None
    out = f(x)
    backward(out)
    g = np.zeros_like(x.data) if x.grad is None else x.grad.astype(np.float64)

    if direction is None:
        norm = np.linalg.norm(g)
        if norm == 0.0:
            direction = np.zeros_like(g)
            direction.reshape(-1)[0] = 1.0
        else:
            direction = g / norm
    v = direction.astype(x.data.dtype)

    orig = x.data.copy()
    x.data = orig + eps * v
    with no_grad():
        hi = float(f(x).data)
    x.data = orig - eps * v
    with no_grad():
        lo = float(f(x).data)
    x.data = orig

    numeric = (hi - lo) / (2.0 * eps)
    analytic = float((g * direction).sum())
    denom = max(abs(analytic), abs(numeric), 1e-6)
    return abs(analytic - numeric) / denom
