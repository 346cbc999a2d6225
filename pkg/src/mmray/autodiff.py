"""Reverse-mode automatic differentiation on float64 arrays.

A :class:`Tape` records primitive operations on :class:`Var` values (scalars
or ndarrays); :func:`backward` runs exact reverse accumulation. Complex
arithmetic is carried as (re, im) pairs of real nodes, which keeps every
recorded primitive real-valued.

Every math helper here falls back to plain numpy when given non-Var inputs,
so the same physics code runs untaped (simulation) or taped (calibration).
Monte Carlo sample choices and hit decisions are never recorded; gradients
flow through amplitudes, pattern values and analytic geometry only.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "Var", "backward", "grad", "finite_diff_check",
    "add", "mul", "exp", "log", "sqrt", "sin", "cos", "where", "relu",
    "vsum", "matmul", "sigmoid", "cmul", "cconj", "cabs2", "cdiv", "csqrt",
    "value_of",
]


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(adj, shape):
    """Reduce an adjoint back to the shape the input had before broadcasting."""
    if adj.shape == tuple(shape):
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and adj.shape[i] != 1)
    if axes:
        adj = adj.sum(axis=axes, keepdims=True)
    return adj


class Tape:
    """Append-only record of primitives, in topological order."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list = []

    def __len__(self):
        return len(self._values)

    def var(self, value) -> "Var":
        """Register a leaf (differentiable input)."""
        return self._record(_asarray(value), (), None)

    def _record(self, value, input_ids, vjp) -> "Var":
        value = _asarray(value)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError("non-finite value recorded on tape")
        self._values.append(value)
        self._inputs.append(tuple(input_ids))
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1)

    def backward(self, output: "Var") -> dict[int, np.ndarray]:
        """Adjoints of ``output`` w.r.t. every node; unused nodes get 0."""
        if output.tape is not self:
            raise ValueError("output does not live on this tape")
        adj: dict[int, np.ndarray] = {output.id: np.ones_like(self._values[output.id])}
        for nid in range(output.id, -1, -1):
            a = adj.get(nid)
            if a is None or self._vjps[nid] is None:
                continue
            for iid, g in zip(self._inputs[nid], self._vjps[nid](a)):
                if g is None:
                    continue
                g = _unbroadcast(_asarray(g), self._values[iid].shape)
                if iid in adj:
                    adj[iid] = adj[iid] + g
                else:
                    adj[iid] = g
        return adj


class Var:
    """A value on a tape. Immutable; supports numpy-style arithmetic."""

    __slots__ = ("tape", "id")
    __array_priority__ = 100  # numpy defers binary ops to Var

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.id]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        val = self.value[key]
        shape = self.value.shape

        def vjp(adj):
            g = np.zeros(shape)
            np.add.at(g, key, adj)
            return (g,)

        return self.tape._record(val, (self.id,), vjp)


def value_of(x):
    """Raw ndarray behind a Var, or the input passed through."""
    return x.value if isinstance(x, Var) else _asarray(x)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _binary(a, b, forward, vjp_maker):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = forward(av, bv)
    if tape is None:
        return out
    ids, picks = [], []
    if isinstance(a, Var):
        ids.append(a.id)
        picks.append(0)
    if isinstance(b, Var):
        ids.append(b.id)
        picks.append(1)

    def vjp(adj):
        both = vjp_maker(adj, av, bv)
        return tuple(both[p] for p in picks)

    return tape._record(out, ids, vjp)


def _unary(x, forward, dfn):
    if not isinstance(x, Var):
        return forward(_asarray(x))
    xv = x.value
    out = forward(xv)
    return x.tape._record(out, (x.id,), lambda adj: (adj * dfn(xv, out),))


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda adj, x, y: (adj, adj))


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y, lambda adj, x, y: (adj * y, adj * x))


def div(a, b):
    return _binary(a, b, lambda x, y: x / y,
                   lambda adj, x, y: (adj / y, -adj * x / (y * y)))


def power(x, p):
    """x ** p for a constant exponent p."""
    p = float(p)
    return _unary(x, lambda v: v ** p, lambda v, out: p * v ** (p - 1.0))


def exp(x):
    return _unary(x, np.exp, lambda v, out: out)


def log(x):
    if np.any(value_of(x) <= 0.0):
        raise FloatingPointError("log of non-positive value")
    return _unary(x, np.log, lambda v, out: 1.0 / v)


def sqrt(x):
    if np.any(value_of(x) < 0.0):
        raise FloatingPointError("sqrt of negative value")
    return _unary(x, np.sqrt, lambda v, out: 0.5 / np.maximum(out, 1e-300))


def sin(x):
    return _unary(x, np.sin, lambda v, out: np.cos(v))


def cos(x):
    return _unary(x, np.cos, lambda v, out: -np.sin(v))


def sigmoid(x):
    return _unary(x, lambda v: 1.0 / (1.0 + np.exp(-v)), lambda v, out: out * (1.0 - out))


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, out: (v > 0.0).astype(np.float64))


def where(cond, a, b):
    """Select with a detached (non-differentiable) condition."""
    cond = value_of(cond).astype(bool)
    return _binary(a, b, lambda x, y: np.where(cond, x, y),
                   lambda adj, x, y: (np.where(cond, adj, 0.0), np.where(cond, 0.0, adj)))


def vsum(x, axis=None):
    if not isinstance(x, Var):
        return np.sum(_asarray(x), axis=axis)
    xv = x.value

    def vjp(adj):
        if axis is None:
            return (np.broadcast_to(adj, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(adj, axis), xv.shape).copy(),)

    return x.tape._record(np.sum(xv, axis=axis), (x.id,), vjp)


def mean(x, axis=None):
    n = value_of(x).size if axis is None else value_of(x).shape[axis]
    return mul(vsum(x, axis=axis), 1.0 / n)


def matmul(a, b):
    """Matrix/vector product for 1-D or 2-D operands."""

    def forward(x, y):
        return x @ y

    def vjp_maker(adj, x, y):
        if x.ndim == 2 and y.ndim == 2:
            return adj @ y.T, x.T @ adj
        if x.ndim == 2 and y.ndim == 1:
            return np.outer(adj, y), x.T @ adj
        if x.ndim == 1 and y.ndim == 2:
            return y @ adj, np.outer(x, adj)
        return adj * y, adj * x  # both 1-D: inner product

    return _binary(a, b, forward, vjp_maker)


def spline_lookup(spline, x):
    """Evaluate a scipy spline-like object (callable with derivative()) at x.

    Registered as a single primitive whose local partial is the spline's
    analytic derivative.
    """
    if not isinstance(x, Var):
        return spline(_asarray(x))
    xv = x.value
    out = spline(xv)
    d = spline.derivative()(xv)
    return x.tape._record(out, (x.id,), lambda adj: (adj * d,))


# -- complex pairs -----------------------------------------------------------


def cmul(a, b):
    """(re, im) product of two complex pairs."""
    ar, ai = a
    br, bi = b
    return (ar * br - ai * bi, ar * bi + ai * br)


def cconj(a):
    return (a[0], -a[1])


def cabs2(a):
    return a[0] * a[0] + a[1] * a[1]


def cdiv(a, b):
    d = cabs2(b)
    n = cmul(a, cconj(b))
    return (n[0] / d, n[1] / d)


def csqrt(a):
    """Principal complex square root of a (re, im) pair."""
    ar, ai = a
    r = sqrt(add(mul(ar, ar), mul(ai, ai)))
    wre = sqrt(mul(add(r, ar), 0.5))
    im_neg = value_of(ai) < 0.0
    mag = sqrt(relu(mul(add(r, mul(ar, -1.0)), 0.5)))
    wim = where(im_neg, mul(mag, -1.0), mag)
    return (wre, wim)


# -- gradient-level API -------------------------------------------------------


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Gradient map {node id -> d output / d node} by reverse accumulation."""
    return tape.backward(output)


def grad(output: Var, inputs: list[Var]) -> list[np.ndarray]:
    adj = output.tape.backward(output)
    return [adj.get(v.id, np.zeros_like(v.value)) for v in inputs]


def finite_diff_check(f, x: np.ndarray, eps: float = 1e-6) -> float:
    """Max relative error between the taped gradient of ``f`` and central
    finite differences.

    ``f`` must accept either a Var (taped evaluation) or a plain ndarray and
    return a scalar Var / float accordingly; it must be deterministic.
    """
    x = _asarray(x).ravel()
    tape = Tape()
    xv = tape.var(x)
    loss = f(xv)
    if not isinstance(loss, Var):
        raise TypeError("f must return a Var when given a Var")
    g = grad(loss, [xv])[0]

    worst = 0.0
    for i in range(len(x)):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        fp = float(value_of(f(xp)))
        fm = float(value_of(f(xm)))
        fd = (fp - fm) / (2.0 * eps)
        err = abs(g[i] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst
