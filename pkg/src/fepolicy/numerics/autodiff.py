"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every differentiable value is a :class:`Var` that lives on a :class:`Tape`.
Operations append a node holding the parent indices and a vector-Jacobian
product closure, so the tape is topologically ordered by construction and
the backward sweep is a single reverse pass.

The module-level functions (``sin``, ``exp``, ``matmul`` ...) accept either
``Var`` or plain arrays; with no ``Var`` among the arguments they fall back to
numpy and record nothing.  Model code (dynamics, costs, MLPs) is written once
against these functions and runs both with and without a tape.
"""

from __future__ import annotations

import numpy as np


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list = []
        self.shapes: list[tuple[int, ...]] = []

    def __len__(self):
        return len(self.parents)

    def var(self, value) -> "Var":
        """Register a leaf (input or trainable parameter)."""
        return self._push(np.asarray(value, dtype=np.float64), (), None)

    def _push(self, value, parents, vjp) -> "Var":
        self.parents.append(parents)
        self.vjps.append(vjp)
        self.shapes.append(np.shape(value))
        return Var(self, len(self.parents) - 1, value)


class Var:
    __slots__ = ("tape", "index", "value")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, value, da, db):
    """Record an elementwise binary op; ``da``/``db`` map (g) -> raw grads."""
    tape = _tape_of(a, b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)
    parents = tuple(x.index for x in (a, b) if isinstance(x, Var))

    def vjp(g):
        out = []
        if a_var:
            out.append(_unbroadcast(da(g), sa))
        if b_var:
            out.append(_unbroadcast(db(g), sb))
        return out

    return tape._push(value, parents, vjp)


def _unary(x, value, dx):
    return x.tape._push(value, (x.index,), lambda g: [dx(g)])


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if _tape_of(a, b) is None:
        return out
    return _binary(a, b, out, lambda g: g, lambda g: g)


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if _tape_of(a, b) is None:
        return out
    return _binary(a, b, out, lambda g: g, lambda g: -g)


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if _tape_of(a, b) is None:
        return out
    return _binary(a, b, out, lambda g: g * vb, lambda g: g * va)


def div(a, b):
    va, vb = value_of(a), value_of(b)
    out = va / vb
    if _tape_of(a, b) is None:
        return out
    return _binary(a, b, out, lambda g: g / vb, lambda g: -g * out / vb)


def neg(x):
    if not isinstance(x, Var):
        return -x
    return _unary(x, -x.value, lambda g: -g)


def power(x, k):
    """``x ** k`` for a constant real exponent ``k``."""
    if not isinstance(x, Var):
        return x**k
    v = x.value
    return _unary(x, v**k, lambda g: g * k * v ** (k - 1))


def square(x):
    if not isinstance(x, Var):
        return x * x
    v = x.value
    return _unary(x, v * v, lambda g: 2.0 * g * v)


def sqrt(x):
    if not isinstance(x, Var):
        return np.sqrt(x)
    out = np.sqrt(x.value)
    return _unary(x, out, lambda g: 0.5 * g / out)


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out)


def log(x):
    if not isinstance(x, Var):
        return np.log(x)
    v = x.value
    return _unary(x, np.log(v), lambda g: g / v)


def sin(x):
    if not isinstance(x, Var):
        return np.sin(x)
    v = x.value
    return _unary(x, np.sin(v), lambda g: g * np.cos(v))


def cos(x):
    if not isinstance(x, Var):
        return np.cos(x)
    v = x.value
    return _unary(x, np.cos(v), lambda g: -g * np.sin(v))


def tan(x):
    if not isinstance(x, Var):
        return np.tan(x)
    out = np.tan(x.value)
    return _unary(x, out, lambda g: g * (1.0 + out * out))


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def relu(x):
    if not isinstance(x, Var):
        return np.maximum(x, 0.0)
    mask = x.value > 0
    return _unary(x, np.where(mask, x.value, 0.0), lambda g: g * mask)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation."""
    v = value_of(x)
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)
    if not isinstance(x, Var):
        return out

    def dx(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner)

    return _unary(x, out, dx)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "gelu": gelu}


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def dx(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary(x, out, dx)


def mean(x, axis=None, keepdims=False):
    v = value_of(x)
    count = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return div(sum(x, axis=axis, keepdims=keepdims), float(count))


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents = tuple(x.index for x in (a, b) if isinstance(x, Var))
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        grads = []
        if a_var:
            if vb.ndim == 1:
                ga = np.multiply.outer(g, vb) if va.ndim > 1 else g * vb
            else:
                ga = g @ np.swapaxes(vb, -1, -2) if g.ndim > 1 else (vb @ g)
            grads.append(_unbroadcast(ga, va.shape))
        if b_var:
            if va.ndim == 1:
                gb = np.multiply.outer(va, g) if vb.ndim > 1 else g * va
            elif vb.ndim == 1:
                gb = np.swapaxes(va, -1, -2) @ g[..., None]
                gb = gb[..., 0]
            else:
                gb = np.swapaxes(va, -1, -2) @ g
            grads.append(_unbroadcast(gb, vb.shape))
        return grads

    return tape._push(out, parents, vjp)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    old = x.shape
    return _unary(x, np.reshape(x.value, shape), lambda g: np.reshape(g, old))


def swapaxes(x, a1, a2):
    if not isinstance(x, Var):
        return np.swapaxes(x, a1, a2)
    return _unary(x, np.swapaxes(x.value, a1, a2), lambda g: np.swapaxes(g, a1, a2))


def getitem(x, idx):
    """Basic (non-fancy) indexing."""
    if not isinstance(x, Var):
        return x[idx]
    shape = x.shape

    def dx(g):
        out = np.zeros(shape)
        out[idx] = g
        return out

    return _unary(x, x.value[idx], dx)


def stack(items, axis=0):
    tape = _tape_of(*items)
    values = [value_of(v) for v in items]
    out = np.stack(values, axis=axis)
    if tape is None:
        return out
    shapes = [np.shape(v) for v in values]
    live = [i for i, v in enumerate(items) if isinstance(v, Var)]

    def vjp(g):
        return [_unbroadcast(np.take(g, i, axis=axis), shapes[i]) for i in live]

    return tape._push(out, tuple(items[i].index for i in live), vjp)


def concatenate(items, axis=0):
    tape = _tape_of(*items)
    values = [value_of(v) for v in items]
    out = np.concatenate(values, axis=axis)
    if tape is None:
        return out
    sizes = [np.shape(v)[axis] for v in values]
    bounds = np.cumsum([0] + sizes)
    live = [i for i, v in enumerate(items) if isinstance(v, Var)]
    ax = axis % out.ndim

    def vjp(g):
        grads = []
        for i in live:
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return tape._push(out, tuple(items[i].index for i in live), vjp)


def solve_spd(a, b):
    """Solve ``a @ x = b`` for symmetric positive definite ``a``.

    Batched over leading axes.  ``b`` may be ``(..., p)`` or ``(..., p, k)``.
    Raises :class:`NotPositiveDefinite` if the factorization fails.
    """
    from .linalg import mat_solve_spd

    va, vb = value_of(a), value_of(b)
    out = mat_solve_spd(va, vb)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    vec = vb.ndim == va.ndim - 1
    parents = tuple(x.index for x in (a, b) if isinstance(x, Var))
    a_var, b_var = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        gb = mat_solve_spd(va, g)
        grads = []
        if a_var:
            if vec:
                ga = -gb[..., :, None] * out[..., None, :]
            else:
                ga = -gb @ np.swapaxes(out, -1, -2)
            grads.append(_unbroadcast(ga, va.shape))
        if b_var:
            grads.append(_unbroadcast(gb, vb.shape))
        return grads

    return tape._push(out, parents, vjp)


def backward(loss: Var) -> list:
    """Reverse sweep from a scalar ``loss``; returns the adjoint of every node.

    Entries for nodes that do not influence ``loss`` are ``None``.
    """
    if np.size(loss.value) != 1:
        raise ValueError("backward() needs a scalar loss")
    tape = loss.tape
    adj: list = [None] * len(tape)
    adj[loss.index] = np.ones_like(loss.value, dtype=np.float64)
    for i in range(loss.index, -1, -1):
        g = adj[i]
        if g is None or not tape.parents[i]:
            continue
        for p, gp in zip(tape.parents[i], tape.vjps[i](g)):
            if adj[p] is None:
                adj[p] = gp
            else:
                adj[p] = adj[p] + gp
    return adj


def grad(loss: Var, wrt) -> list[np.ndarray]:
    """Gradient of ``loss`` with respect to each leaf in ``wrt``."""
    adj = backward(loss)
    out = []
    for v in wrt:
        g = adj[v.index]
        out.append(np.zeros(v.shape) if g is None else np.asarray(g, dtype=np.float64))
    return out


def value_and_grad(fn, *args):
    """Evaluate ``fn(*vars)`` on a fresh tape and differentiate it.

    ``fn`` must return a scalar ``Var``.  Returns ``(value, [grads...])``.
    """
    tape = Tape()
    leaves = [tape.var(a) for a in args]
    loss = fn(*leaves)
    if not isinstance(loss, Var):
        return float(loss), [np.zeros(np.shape(a)) for a in args]
    return float(loss.value), grad(loss, leaves)
