"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every op executed while a Tape is active records a backward
closure on that tape.  Calling ``Tape.backward(loss)`` replays the closures in
reverse execution order and accumulates gradients into ``Tensor.grad``.
Without an active tape, ops are plain numpy calls with no recording overhead.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "add",
    "sub",
    "mul",
    "divide",
    "scale",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "take",
    "select_channel",
    "index_axis0",
    "reduce_sum",
    "reduce_mean",
    "log",
    "exp",
    "clip",
    "minimum",
    "maximum",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "cosine_similarity_matrix",
    "apply_op",
]

_COS_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an op boundary."""


class Tape:
    """Ordered record of executed ops for one backward pass.

    A tape is rebuilt per forward pass; backward may run at most once per
    recording.  Tensors and their tape are confined to a single thread.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = self._outer
        return False

    @classmethod
    def active(cls):
        return cls._active

    def record(self, fn):
        self._records.append(fn)

    def backward(self, loss: "Tensor"):
        """Seed d(loss)/d(loss)=1 and propagate through all recorded ops."""
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; re-record the forward pass")
        if loss.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._records):
            fn()


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return divide(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(out_data, inputs, grad_fn) -> Tensor:
    """Wrap an op result, recording ``grad_fn`` on the active tape.

    ``grad_fn(out_grad)`` must return one gradient array (or None) per input,
    in order.  The finiteness invariant is enforced here, i.e. at every op
    boundary.
    """
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:

        def _backward():
            if out.grad is None:  # output never contributed to the loss
                return
            for t, g in zip(inputs, grad_fn(out.grad)):
                if t.requires_grad and g is not None:
                    t._accum(g)

        tape.record(_backward)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return apply_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return apply_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return apply_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def divide(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return apply_op(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with matching leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return apply_op(out, (a, b), grad)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return apply_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    return apply_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, indices) -> Tensor:
    """Gather from the flattened tensor."""
    idx = np.asarray(indices)
    out = a.data.reshape(-1)[idx]

    def grad(g):
        ga = np.zeros(a.data.size)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1))
        return (ga.reshape(a.shape),)

    return apply_op(out, (a,), grad)


def select_channel(a: Tensor, idx: int) -> Tensor:
    """a[..., idx], keeping the leading axes."""
    out = a.data[..., idx]

    def grad(g):
        ga = np.zeros_like(a.data)
        ga[..., idx] = g
        return (ga,)

    return apply_op(out, (a,), grad)


def index_axis0(a: Tensor, idx: int) -> Tensor:
    out = a.data[idx]

    def grad(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return apply_op(out, (a,), grad)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op(out, (a,), grad)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(a.data)
        except FloatingPointError:
            raise NonFiniteError("log of non-positive value") from None
    return apply_op(out, (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return apply_op(out, (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    pick_a = a.data <= b.data  # ties route gradient to the first operand
    out = np.where(pick_a, a.data, b.data)
    return apply_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    return apply_op(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return apply_op(a.data * pos, (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return apply_op(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return apply_op(out, (a,), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-row normalization of a 2-D tensor followed by affine gamma/beta."""
    if x.ndim != 2:
        raise ShapeError(f"layer_norm expects a 2-D input, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("gamma/beta must be 1-D of the feature size")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def grad(g):
        gg = gamma.data * g
        gx = inv / d * (d * gg - gg.sum(axis=1, keepdims=True) - xhat * (gg * xhat).sum(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return apply_op(out, (x, gamma, beta), grad)


def cosine_similarity_matrix(u: Tensor) -> Tensor:
    """All-pairs cosine similarity of the rows of a 2-D tensor.

    The result is exactly symmetric with unit diagonal.  Rows with norm below
    1e-12 have their norm clamped there (with a warning) instead of erroring,
    since near-zero rows occur legitimately for early noise inputs.
    """
    if u.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got {u.shape}")
    norms = np.linalg.norm(u.data, axis=1)
    if np.any(norms < _COS_EPS):
        warnings.warn("zero-norm row in cosine_similarity_matrix; norm clamped at 1e-12")
    n = np.maximum(norms, _COS_EPS)
    v = u.data / n[:, None]
    gram = v @ v.T
    out = 0.5 * (gram + gram.T)
    np.fill_diagonal(out, 1.0)

    def grad(g):
        gs = 0.5 * (g + g.T)  # adjoint of the symmetrization
        np.fill_diagonal(gs, 0.0)  # diagonal is the constant 1
        gv = 2.0 * (gs @ v)
        gu = (gv - v * (gv * v).sum(axis=1, keepdims=True)) / n[:, None]
        return (gu,)

    return apply_op(out, (u,), grad)
