"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed. An operation whose inputs include at least one
``requires_grad`` tensor (while gradient recording is enabled) records
its parents and a backward rule; ``backward()`` on a scalar then walks
the graph once in reverse topological order and accumulates ``.grad``
on every reachable leaf.

Softmax and log-softmax are always computed with max-subtraction /
log-sum-exp so finite inputs can never overflow.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (e.g. frozen teacher forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic introspection -------------------------------------------------

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every requires_grad leaf reachable from here.

        Only scalars (size-1 tensors) may seed a backward pass. Repeated
        calls without resetting grads accumulate.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ContractError("backward() on a tensor with no grad path")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def accum(t: "Tensor", g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, accum)
            else:
                node.grad = g if node.grad is None else node.grad + g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _shift(self, -float(other))

    def __rsub__(self, other):
        return _shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not provided; multiply by a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def backward(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def backward(g, accum):
        accum(a, _unbroadcast(g, a.shape))
        accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def backward(g, accum):
        accum(a, _unbroadcast(g * b.data, a.shape))
        accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, accum):
        accum(a, -g)

    return _make(-a.data, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    data = a.data * a.data.dtype.type(c)

    def backward(g, accum):
        accum(a, g * c)

    return _make(data, (a,), backward)


def _shift(a: Tensor, c: float) -> Tensor:
    data = a.data + a.data.dtype.type(c)

    def backward(g, accum):
        accum(a, g)

    return _make(data, (a,), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g, accum):
        accum(a, g.reshape(a.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = np.transpose(a.data, axes)

    def backward(g, accum):
        accum(a, np.transpose(g, inverse))

    return _make(data, (a,), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def backward(g, accum):
        accum(a, _unbroadcast(g, a.shape))

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g, accum):
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            accum(t, g[tuple(sl)])
            start += n

    return _make(data, tuple(tensors), backward)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into place."""
    data = a.data[key]
    if isinstance(data, np.ndarray):
        data = data.copy()
    else:
        data = np.asarray(data, dtype=a.data.dtype)

    def backward(g, accum):
        buf = np.zeros_like(a.data)
        buf[key] = g
        accum(a, buf)

    return _make(data, (a,), backward)


# -- reductions ----------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, accum):
        accum(a, _expand_reduced(np.asarray(g), a.shape, axis, keepdims).astype(a.data.dtype, copy=False))

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    data = a.data.mean(axis=axis, keepdims=keepdims, dtype=a.data.dtype)

    def backward(g, accum):
        gg = _expand_reduced(np.asarray(g), a.shape, axis, keepdims) / count
        accum(a, gg.astype(a.data.dtype, copy=False))

    return _make(np.asarray(data, dtype=a.data.dtype), (a,), backward)


# -- matrix product -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading batch dimensions.

    Backward accumulates g @ b^T into a and a^T @ g into b, summing
    over broadcast batch dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None
    data = a.data @ b.data

    def backward(g, accum):
        accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(data, (a, b), backward)


# -- activations ----------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g, accum):
        accum(a, g * (a.data > 0))

    return _make(data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype, copy=False)

    def backward(g, accum):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        accum(a, g * (cdf + x * pdf))

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g, accum):
        accum(a, g * data)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g, accum):
        accum(a, g / a.data)

    return _make(data, (a,), backward)


# -- softmax family ---------------------------------------------------------------


def _check_temperature(temperature) -> float:
    t = float(temperature)
    if not math.isfinite(t) or t <= 0.0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    return t


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """exp(x_i/T) / sum_j exp(x_j/T), computed with max-subtraction."""
    t = _check_temperature(temperature)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data / a.data.dtype.type(t)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g, accum):
        inner = (g * data).sum(axis=axis, keepdims=True)
        accum(a, (g - inner) * data / t)

    return _make(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """x_i/T - log sum_j exp(x_j/T) via the log-sum-exp trick."""
    t = _check_temperature(temperature)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"log_softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data / a.data.dtype.type(t)
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    data = z - lse

    def backward(g, accum):
        p = np.exp(data)
        accum(a, (g - p * g.sum(axis=axis, keepdims=True)) / t)

    return _make(data, (a,), backward)


# -- normalization ------------------------------------------------------------------


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    data = xc * inv

    def backward(g, accum):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * data).mean(axis=-1, keepdims=True)
        accum(a, inv * (g - gm - data * gy))

    return _make(data, (a,), backward)


# -- convolution and pooling -----------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NHWC layout, zero padding.

    x: (N, H, W, Cin), w: (KH, KW, Cin, Cout) -> (N, OH, OW, Cout).
    Implemented as a shift-and-matmul accumulation over kernel offsets,
    which keeps memory flat for the small kernels used here.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D x and w, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: bad stride/padding ({stride}, {padding})")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x.data
    acc = np.zeros((n * oh * ow, cout), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            acc += xs.reshape(-1, cin) @ w.data[i, j]
    data = acc.reshape(n, oh, ow, cout)

    def backward(g, accum):
        g2 = g.reshape(-1, cout)
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :]
                dw[i, j] = xs.reshape(-1, cin).T @ g2
                dxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += (
                    g2 @ w.data[i, j].T
                ).reshape(n, oh, ow, cin)
        dx = dxp[:, padding : padding + h, padding : padding + wd, :] if padding else dxp
        accum(x, dx)
        accum(w, dw)

    return _make(data, (x, w), backward)


def _pool_check(x: Tensor, k: int) -> tuple[int, int, int, int, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"pool2d: expected 4-D NHWC input, got {x.shape}")
    if k < 1:
        raise ParameterError(f"pool2d: window must be >= 1, got {k}")
    n, h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"pool2d: window {k} does not divide spatial extents of {x.shape}")
    return n, h, w, c, h // k, w // k


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling (stride = window)."""
    n, h, w, c, oh, ow = _pool_check(x, k)
    win = x.data.reshape(n, oh, k, ow, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, k * k)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g, accum):
        buf = np.zeros((n, oh, ow, c, k * k), dtype=x.data.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        dx = buf.reshape(n, oh, ow, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        accum(x, dx)

    return _make(data, (x,), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride = window)."""
    n, h, w, c, oh, ow = _pool_check(x, k)
    data = x.data.reshape(n, oh, k, ow, k, c).mean(axis=(2, 4), dtype=x.data.dtype)

    def backward(g, accum):
        dx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        accum(x, dx.astype(x.data.dtype, copy=False))

    return _make(data, (x,), backward)


# -- dropout -------------------------------------------------------------------------


def dropout(a: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Bernoulli dropout, scaled by 1/(1-p) in train mode; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("train-mode dropout needs an explicit rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype)
    mask = keep / a.data.dtype.type(1.0 - p)
    data = a.data * mask

    def backward(g, accum):
        accum(a, g * mask)

    return _make(data, (a,), backward)


def argmax(a: Tensor | np.ndarray, axis: int = -1) -> np.ndarray:
    """Index of the row maximum; ties resolve to the lowest index."""
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.argmax(arr, axis=axis)
