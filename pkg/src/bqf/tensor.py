"""Minimal deterministic reverse-mode automatic differentiation on numpy buffers.

A ``Tensor`` wraps a float32/float64 numpy array plus an optional gradient
buffer and a link to the op that produced it. Ops build the graph eagerly;
``backward`` walks it once in reverse topological order and accumulates
adjoints additively across fan-out.

Conventions that the rest of the package relies on:
  * ``sign(0) = +1``. The ``sign`` op carries no gradient rule at all
    (gradients stop there); ``sign_ste`` is the clipped straight-through
    surrogate and is flagged as an estimator.
  * Estimator-flagged ops (``sign``, ``sign_ste``, ``round_ste``) poison
    ``finite_diff_check``: a surrogate gradient must never be validated
    against finite differences, so the check refuses instead of reporting
    a meaningless number.
  * ``l2_norm`` at the zero vector and ``abs``/``l1_norm`` at zero use the
    zero subgradient.
  * Checked mode (NaN/Inf and domain assertions) is off by default; tests
    enable it via the ``checked()`` context manager.

All computation is plain numpy, so results are bit-reproducible for a fixed
thread configuration.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum

import numpy as np


class DType(Enum):
    f32 = "f32"
    f64 = "f64"

    @property
    def np_dtype(self):
        return np.float32 if self is DType.f32 else np.float64


_NP_TO_DTYPE = {np.dtype(np.float32): DType.f32, np.dtype(np.float64): DType.f64}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside an op's domain (checked mode), or non-finite values."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar root, repeated backward...)."""


class NonDifferentiableError(GraphError):
    """The graph contains an op without a true derivative."""


_checked = False


def set_checked(on: bool) -> None:
    global _checked
    _checked = bool(on)


def is_checked() -> bool:
    return _checked


@contextmanager
def checked(on: bool = True):
    """Temporarily toggle NaN/Inf and domain assertions."""
    global _checked
    prev = _checked
    _checked = bool(on)
    try:
        yield
    finally:
        _checked = prev


def _assert_finite(data: np.ndarray, op: str) -> None:
    if _checked and not np.all(np.isfinite(data)):
        raise DomainError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional float array with optional grad buffer and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjp",
                 "estimators", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype: DType | None = None):
        if dtype is not None:
            np_dt = dtype.np_dtype
        elif isinstance(data, np.ndarray) and data.dtype in _NP_TO_DTYPE:
            np_dt = data.dtype  # explicit float arrays keep their precision
        else:
            np_dt = np.float32  # framework default
        self.data = np.ascontiguousarray(np.asarray(data), dtype=np_dt)
        _assert_finite(self.data, "leaf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = ""
        self.parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.estimators: frozenset[str] = frozenset()
        self._backward_done = False

    # -- construction used by ops ------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...],
                 vjp, extra_estimators: frozenset[str] = frozenset()) -> "Tensor":
        est = extra_estimators
        for p in parents:
            if p.estimators:
                est = est | p.estimators
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.estimators = est
        out._backward_done = False
        if any(p.requires_grad for p in parents):
            # vjp may be None (sign): the graph stays linked but gradients stop.
            out.requires_grad = True
            out.parents = parents
            out._vjp = vjp
        else:
            out.requires_grad = False
            out.parents = ()
            out._vjp = None
        _assert_finite(data, op)
        return out

    # -- basic introspection -----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> DType:
        return _NP_TO_DTYPE[self.data.dtype]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None
        self._backward_done = False

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.op = "detach"
        out.parents = ()
        out._vjp = None
        out.estimators = frozenset()  # a detached value is a constant
        out._backward_done = False
        return out

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}{flag}, op={self.op!r})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return abs_(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def _lift(x, dtype: DType) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype.np_dtype))


def _check_dtypes(*ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise TypeError(f"mixed dtypes in one graph: {sorted(str(d) for d in dts)}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    _broadcastable(a, b, "add")
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(data, "add", (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    _broadcastable(a, b, "sub")
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(data, "sub", (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    _broadcastable(a, b, "mul")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._from_op(data, "mul", (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    _check_dtypes(a, b)
    _broadcastable(a, b, "div")
    if _checked and np.any(b.data == 0):
        raise DomainError("div: divisor contains zero")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)

    return Tensor._from_op(data, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - y * y),)

    return Tensor._from_op(y, "tanh", (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data >= 0
    data = np.where(mask, a.data, slope * a.data)

    def vjp(g):
        return (g * np.where(mask, 1.0, slope).astype(a.data.dtype),)

    return Tensor._from_op(data.astype(a.data.dtype), "leaky_relu", (a,), vjp)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, slope=0.0)


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    s = np.sign(a.data)  # 0 at 0: zero subgradient

    def vjp(g):
        return (g * s,)

    return Tensor._from_op(data, "abs", (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    if _checked and np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.sqrt(a.data)

    def vjp(g):
        with np.errstate(divide="ignore"):
            return (g / (2.0 * y),)

    return Tensor._from_op(y, "sqrt", (a,), vjp)


def square(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * 2.0 * ad,)

    return Tensor._from_op(ad * ad, "square", (a,), vjp)


def sign(a: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = +1. Carries no gradient rule."""
    data = np.where(a.data >= 0, 1.0, -1.0).astype(a.data.dtype)
    return Tensor._from_op(data, "sign", (a,), None,
                           extra_estimators=frozenset({"sign"}))


def sign_ste(a: Tensor, threshold: float = 1.0) -> Tensor:
    """sign(0)=+1 forward; clipped straight-through backward (zero where |a| > threshold)."""
    data = np.where(a.data >= 0, 1.0, -1.0).astype(a.data.dtype)
    mask = (np.abs(a.data) <= threshold).astype(a.data.dtype)

    def vjp(g):
        return (g * mask,)

    return Tensor._from_op(data, "sign_ste", (a,), vjp,
                           extra_estimators=frozenset({"sign_ste"}))


def round_ste(a: Tensor) -> Tensor:
    """Round half away from zero forward; identity backward."""
    data = np.copysign(np.floor(np.abs(a.data) + 0.5), a.data).astype(a.data.dtype)
    return Tensor._from_op(data, "round_ste", (a,), lambda g: (g,),
                           extra_estimators=frozenset({"round_ste"}))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clip: lo {lo} > hi {hi}")
    data = np.clip(a.data, lo, hi)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def vjp(g):
        return (g * mask,)

    return Tensor._from_op(data, "clip", (a,), vjp)


ELEMENTWISE_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "tanh": tanh,
    "leaky_relu": leaky_relu, "abs": abs_, "sqrt": sqrt, "square": square,
    "sign": sign, "clip": clip,
}


def elementwise(op: str, *inputs: Tensor, **params) -> Tensor:
    """Dispatch an elementwise op by name (see ELEMENTWISE_OPS)."""
    try:
        fn = ELEMENTWISE_OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs, **params)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return Tensor._from_op(data, "reshape", (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(data, "transpose", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, "concat", tensors, vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(data, "matmul", (a, b), vjp)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (kh, kw, in_ch, out_ch) kernels."""
    _check_dtypes(x, kernels)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got {x.shape}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be (kh, kw, in, out), got {kernels.shape}")
    n, c, h, w = x.shape
    kh, kw, m, f = kernels.shape
    if c != m:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {m}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError("conv2d: spatial dims incompatible with stride/pad")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d: non-positive output size")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (n, c, ho, wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    kmat = np.ascontiguousarray(kernels.data.transpose(2, 0, 1, 3)).reshape(c * kh * kw, f)
    out = (cols2 @ kmat).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    hp, wp = h + 2 * pad, w + 2 * pad

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        gk = (cols2.T @ g2).reshape(c, kh, kw, f).transpose(1, 2, 0, 3)
        gcols = (g2 @ kmat.T).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return np.ascontiguousarray(gx), np.ascontiguousarray(gk)

    return Tensor._from_op(out, "conv2d", (x, kernels), vjp)


def avg_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2: spatial dims must be even, got {x.shape}")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(3, 5))

    def vjp(g):
        ge = np.broadcast_to(g[:, :, :, None, :, None] * 0.25,
                             (n, c, h // 2, 2, w // 2, 2))
        return (ge.reshape(n, c, h, w).copy(),)

    return Tensor._from_op(out, "avg_pool2x2", (x,), vjp)


def max_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2: spatial dims must be even, got {x.shape}")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(r).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(flat, axis=-1)  # first max wins: deterministic tie-break
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w).copy(),)

    return Tensor._from_op(out, "max_pool2x2", (x,), vjp)


# -- reductions ---------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _reduce_sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(data, dtype=a.data.dtype), "sum", (a,), vjp)


def _reduce_mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if a.data.ndim else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).astype(a.data.dtype),)

    return Tensor._from_op(np.asarray(data, dtype=a.data.dtype), "mean", (a,), vjp)


def l1_norm(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("l1_norm: empty input")
    data = np.asarray(np.abs(a.data).sum(), dtype=a.data.dtype)
    s = np.sign(a.data)

    def vjp(g):
        return (g * s,)

    return Tensor._from_op(data, "l1_norm", (a,), vjp)


def l2_norm(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("l2_norm: empty input")
    nrm = float(np.sqrt((a.data.astype(np.float64) ** 2).sum()))
    data = np.asarray(nrm, dtype=a.data.dtype)
    ad = a.data

    def vjp(g):
        if nrm == 0.0:
            return (np.zeros_like(ad),)  # zero subgradient at the origin
        return (g * ad / np.asarray(nrm, dtype=ad.dtype),)

    return Tensor._from_op(data, "l2_norm", (a,), vjp)


REDUCE_OPS = {"sum": lambda x: x.sum(), "mean": lambda x: x.mean(),
              "l1_norm": l1_norm, "l2_norm": l2_norm}


def reduce(op: str, x: Tensor) -> Tensor:
    """Dispatch a full reduction by name (see REDUCE_OPS)."""
    if x.size == 0:
        raise ShapeError(f"reduce {op!r}: empty input")
    try:
        fn = REDUCE_OPS[op]
    except KeyError:
        raise ValueError(f"unknown reduce op {op!r}") from None
    return fn(x)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple[int, ...],
                    eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Fused train-mode batch normalization over ``axes``.

    gamma/beta must already be shaped to broadcast against x (keepdims form).
    Returns (output, batch_mean, batch_var); the batch statistics are treated
    as functions of x in the backward pass. Fused into one op because the
    composed-primitive form dominates the meta-quantizer's step time.
    """
    _check_dtypes(x, gamma, beta)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    s = np.sqrt(var + eps)
    ynorm = xc / s
    out = gamma.data * ynorm + beta.data
    xshape, gshape, bshape = x.shape, gamma.shape, beta.shape

    def vjp(g):
        gy = g * gamma.data
        mean_gy = gy.mean(axis=axes, keepdims=True)
        mean_gyy = (gy * ynorm).mean(axis=axes, keepdims=True)
        dx = (gy - mean_gy - ynorm * mean_gyy) / s
        dgamma = _unbroadcast((g * ynorm).sum(axis=axes, keepdims=True), gshape)
        dbeta = _unbroadcast(g.sum(axis=axes, keepdims=True), bshape)
        return _unbroadcast(dx, xshape), dgamma, dbeta

    t = Tensor._from_op(out.astype(x.data.dtype), "batchnorm", (x, gamma, beta), vjp)
    return t, mu, var


# -- losses -------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch from raw logits (numerically stable)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy: labels must be 1-D matching the batch")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    loss = -logp[np.arange(n), labels].mean()
    probs = ez / sez

    def vjp(g):
        gi = probs.copy()
        gi[np.arange(n), labels] -= 1.0
        return (gi * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), "softmax_ce", (logits,), vjp)


# -- graph & backward ---------------------------------------------------------


@dataclass(frozen=True)
class GraphNode:
    op: str
    parents: tuple[int, ...]


class Graph:
    """Topologically ordered snapshot of the op graph below a tensor.

    Every parent index precedes its child (index order is the traversal
    order ``backward`` uses), so one reverse sweep visits each node once.
    """

    def __init__(self, nodes: list[GraphNode]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        order = _topo_order(root, grad_only=False)
        index = {id(t): i for i, t in enumerate(order)}
        nodes = [GraphNode(t.op or "leaf",
                           tuple(index[id(p)] for p in t.parents))
                 for t in order]
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _topo_order(root: Tensor, grad_only: bool = True) -> list[Tensor]:
    """Parents-before-children ordering via iterative post-order DFS."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if id(p) not in seen and (p.requires_grad or not grad_only):
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``root``.

    Adjoints accumulate additively across fan-out and across repeated calls
    on different roots; calling twice on the same root without resetting
    raises GraphError.
    """
    if root.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if root._backward_done:
        raise GraphError("backward: already ran for this root; zero grads and rebuild first")
    if not root.requires_grad:
        root._backward_done = True
        return  # constant root: nothing depends on parameters
    order = _topo_order(root, grad_only=True)
    root.grad = np.ones_like(root.data)
    for t in reversed(order):
        if t._vjp is None or t.grad is None:
            continue
        grads = t._vjp(t.grad)
        if _checked:
            for g in grads:
                if g is not None and not np.all(np.isfinite(g)):
                    raise DomainError(f"non-finite gradient out of op '{t.op}'")
        for p, g in zip(t.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
    root._backward_done = True


# -- finite differences --------------------------------------------------------


def finite_diff_check(f, *points: Tensor, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    Returns the max over all coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.

    Raises NonDifferentiableError if the graph built by ``f`` contains an op
    without a true derivative (sign or straight-through surrogates), and
    DomainError if ``f`` is non-finite at a probe point.
    """
    pts = [Tensor(np.array(p.data, copy=True), requires_grad=True, dtype=p.dtype)
           for p in points]
    out = f(*pts)
    if out.estimators:
        ops = ", ".join(sorted(out.estimators))
        raise NonDifferentiableError(f"graph contains non-differentiable op(s): {ops}")
    if out.size != 1:
        raise GraphError("finite_diff_check: f must be scalar-valued")
    backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in pts]

    consts = [Tensor(p.data, dtype=p.dtype) for p in pts]

    def eval_f() -> float:
        r = f(*consts)
        v = float(r.data)
        if not np.isfinite(v):
            raise DomainError("finite_diff_check: f non-finite at probe point")
        return v

    worst = 0.0
    for p, a in zip(consts, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = eval_f()
            flat[i] = orig - epsilon
            fm = eval_f()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            denom = max(abs(float(aflat[i])), abs(numeric), 1e-12)
            worst = max(worst, abs(float(aflat[i]) - numeric) / denom)
    return worst
