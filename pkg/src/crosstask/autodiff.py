"""Reverse-mode automatic differentiation on dense numpy arrays.

The graph is taped implicitly: every operation returns a new :class:`Tensor`
holding its inputs and a vector-Jacobian callback per input.  ``backward()``
walks the tape in reverse topological order and accumulates gradients
additively, so a tensor feeding several consumers receives the sum of their
contributions.

Conventions:

- arrays are 64-bit floats by default (``set_default_dtype`` changes the
  training precision; verification code should leave it at float64);
- matmul supports ``(..., n) @ (n, p)`` — stacked left operands against a
  2-D weight — which is all the models here need;
- stochastic ops (dropout, Gaussian reparameterization) take an
  :class:`~crosstask.rng.RngStream` and are pure functions of their inputs
  plus the stream state;
- a tensor's graph is confined to one thread during forward/backward.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DimensionError
from .rng import RngStream

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for newly created tensors (training-mode knob)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense array participating in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_inputs", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._inputs: tuple = ()
        self._vjps: tuple = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data, inputs, vjps) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        tracked_inputs = []
        tracked_vjps = []
        if _GRAD_ENABLED:
            for t, vjp in zip(inputs, vjps):
                if t.requires_grad:
                    tracked_inputs.append(t)
                    tracked_vjps.append(vjp)
        out._inputs = tuple(tracked_inputs)
        out._vjps = tuple(tracked_vjps)
        out.requires_grad = bool(tracked_inputs)
        return out

    @staticmethod
    def _coerce(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward --------------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor.

        ``grad`` defaults to ones and may be omitted only for scalars.
        Gradients accumulate additively into ``.grad`` of every reachable
        tensor with ``requires_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient requires a scalar, "
                    f"got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        # Iterative topological order (forward graphs can be deep: long
        # sequences chain one node per timestep).
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in zip(node._inputs, node._vjps):
                contribution = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contribution
                else:
                    grads[key] = contribution

    # -- operator sugar ----------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- elementwise arithmetic -----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return Tensor._result(
        data, (a, b),
        (lambda g: _unbroadcast(g, a.data.shape),
         lambda g: _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return Tensor._result(
        data, (a, b),
        (lambda g: _unbroadcast(g, a.data.shape),
         lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return Tensor._result(
        data, (a, b),
        (lambda g: _unbroadcast(g * b.data, a.data.shape),
         lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    return Tensor._result(
        data, (a, b),
        (lambda g: _unbroadcast(g / b.data, a.data.shape),
         lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), (lambda g: -g,))


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data ** exponent
    return Tensor._result(
        data, (a,), (lambda g: g * exponent * a.data ** (exponent - 1),))


def square(a: Tensor) -> Tensor:
    return Tensor._result(a.data * a.data, (a,), (lambda g: g * 2.0 * a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return Tensor._result(data, (a,), (lambda g: g * data,))


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), (lambda g: g / a.data,))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes inside the open interval, zero outside."""
    data = np.clip(a.data, low, high)
    inside = (a.data > low) & (a.data < high)
    return Tensor._result(data, (a,), (lambda g: g * inside,))


# -- nonlinearities ---------------------------------------------------------


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_raw(a.data)
    return Tensor._result(data, (a,), (lambda g: g * data * (1.0 - data),))


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)
    return Tensor._result(data, (a,), (lambda g: g * (1.0 - data * data),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    data = np.where(a.data >= 0, a.data, slope * a.data)
    return Tensor._result(
        data, (a,), (lambda g: g * np.where(a.data >= 0, 1.0, slope),))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed as max(x, 0) + ln(1 + e^-|x|) for overflow safety.

    Output is strictly positive; derivative is the logistic sigmoid.
    """
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor._result(data, (a,), (lambda g: g * _sigmoid_raw(x),))


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``(..., n) @ (n, p)``; gradients flow to both sides."""
    if b.data.ndim != 2 or a.data.ndim < 1:
        raise DimensionError(
            f"matmul expects (..., n) @ (n, p); got {a.data.shape} @ {b.data.shape}")
    n = a.data.shape[-1]
    if n != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def grad_a(g):
        return g @ b.data.T

    def grad_b(g):
        if a.data.ndim == 1:
            return np.outer(a.data, g)
        return a.data.reshape(-1, n).T @ g.reshape(-1, b.data.shape[1])

    return Tensor._result(data, (a, b), (grad_a, grad_b))


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return Tensor._result(data, (a,), (lambda g: g.reshape(a.data.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    data = np.broadcast_to(a.data, shape)
    return Tensor._result(data, (a,), (lambda g: _unbroadcast(g, a.data.shape),))


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return out

    return Tensor._result(data, (a,), (vjp,))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Tensor._result(data, tuple(tensors),
                          tuple(make_vjp(i) for i in range(len(tensors))))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return Tensor._result(data, tuple(tensors),
                          tuple(make_vjp(i) for i in range(len(tensors))))


# -- reductions --------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return Tensor._result(data, (a,), (vjp,))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.data.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, a.data.shape).copy()

    return Tensor._result(data, (a,), (vjp,))


# -- stochastic ops ----------------------------------------------------------


def dropout(a: Tensor, rate: float, stream: RngStream,
            active: bool = True) -> Tensor:
    """Zero each element with probability ``rate``; scale survivors by 1/(1-rate).

    The same masking path serves training regularization and Monte-Carlo
    replays for epistemic uncertainty; ``active=False`` is the identity.
    The mask is a pure function of the stream state, so replays are exact.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not active:
        return Tensor._result(a.data, (a,), (lambda g: g,))
    keep = (stream.uniform(a.data.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.data.dtype)
    return Tensor._result(a.data * keep, (a,), (lambda g: g * keep,))


def gaussian_sample(mu: Tensor, sigma: Tensor, stream: RngStream) -> Tensor:
    """Reparameterized draw ``mu + sigma * eps`` with ``eps ~ N(0, 1)``.

    Gradient flows to ``mu`` and ``sigma``; ``eps`` is a constant of the draw.
    """
    shape = np.broadcast_shapes(mu.data.shape, sigma.data.shape)
    eps = stream.normal(shape).astype(mu.data.dtype)
    data = mu.data + sigma.data * eps
    return Tensor._result(
        data, (mu, sigma),
        (lambda g: _unbroadcast(g, mu.data.shape),
         lambda g: _unbroadcast(g * eps, sigma.data.shape)))


# -- recurrent cell ----------------------------------------------------------


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], wx: Tensor, wh: Tensor,
              b: Tensor) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """One LSTM cell step.

    Gate layout along the last axis of the packed pre-activation is
    ``[input, forget, candidate, output]``; input/forget/output gates are
    logistic, the candidate is tanh.  ``x`` is ``(..., in)``; ``h`` and ``c``
    are ``(..., k)``; ``wx`` is ``(in, 4k)``, ``wh`` ``(k, 4k)``, ``b`` ``(4k,)``.
    Chaining steps over a sequence backpropagates through time.
    """
    h, c = state
    k = h.data.shape[-1]
    if wx.data.shape[-1] != 4 * k or wh.data.shape != (k, 4 * k) \
            or b.data.shape != (4 * k,):
        raise DimensionError(
            f"lstm_step parameter extents inconsistent with hidden size {k}: "
            f"wx {wx.data.shape}, wh {wh.data.shape}, b {b.data.shape}")
    if x.data.shape[-1] != wx.data.shape[0]:
        raise DimensionError(
            f"lstm_step input extent {x.data.shape} does not match wx {wx.data.shape}")
    gates = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(getitem(gates, (..., slice(0, k))))
    f = sigmoid(getitem(gates, (..., slice(k, 2 * k))))
    g = tanh(getitem(gates, (..., slice(2 * k, 3 * k))))
    o = sigmoid(getitem(gates, (..., slice(3 * k, 4 * k))))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, (h_next, c_next)
