"""Second-order forward jets and a reverse-mode tape over jet arithmetic.

A jet stores a value together with first derivatives along ``k`` tangent
directions and second derivatives along a set of direction pairs.  All
components live in one array of shape ``(C, *batch)`` with channels laid
out as ``[val, d1_0 .. d1_{k-1}, d2_p0 .. d2_p{P-1}]``.  By default the
pairs are every ``(i, j)`` with ``i <= j`` in row-major order, i.e. the
packed upper triangle of the Hessian.

The :class:`Tape` records jet-valued operations so that the gradient of a
scalar result (which may itself contain input derivatives of a network)
with respect to trainable leaves is obtained in one reverse sweep.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class JetLayout:
    """Channel layout of a jet: ``k`` tangent directions and the stored pairs."""

    __slots__ = ("k", "pairs", "I", "J", "_index")

    def __init__(self, k: int, pairs: Iterable[tuple[int, int]] | None = None):
        if k < 0:
            raise ValueError("k must be >= 0")
        if pairs is None:
            pairs = [(i, j) for i in range(k) for j in range(i, k)]
        norm = []
        for i, j in pairs:
            if not (0 <= i < k and 0 <= j < k):
                raise ValueError(f"pair {(i, j)} out of range for k={k}")
            norm.append((min(i, j), max(i, j)))
        self.k = int(k)
        self.pairs = tuple(norm)
        self.I = np.array([p[0] for p in norm], dtype=np.intp)
        self.J = np.array([p[1] for p in norm], dtype=np.intp)
        self._index = {p: n for n, p in enumerate(norm)}

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_channels(self) -> int:
        return 1 + self.k + len(self.pairs)

    def pair_slot(self, i: int, j: int) -> int:
        """Channel index of the second derivative along directions i and j."""
        return 1 + self.k + self._index[(min(i, j), max(i, j))]

    def __eq__(self, other) -> bool:
        return isinstance(other, JetLayout) and self.k == other.k and self.pairs == other.pairs

    def __hash__(self) -> int:
        return hash((self.k, self.pairs))

    def __repr__(self) -> str:
        return f"JetLayout(k={self.k}, pairs={self.pairs})"

    def scatter(self, vals_i: np.ndarray, vals_j: np.ndarray) -> np.ndarray:
        """Sum per-pair arrays onto their directions: out[a] = sum_{p: I_p=a} vals_i[p] + sum_{p: J_p=a} vals_j[p]."""
        out = np.zeros((self.k,) + np.broadcast_shapes(vals_i.shape[1:], vals_j.shape[1:]))
        for p, (i, j) in enumerate(self.pairs):
            out[i] += vals_i[p]
            out[j] += vals_j[p]
        return out


# ---------------------------------------------------------------------------
# kernels on channel arrays


def _matmul_last(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b over the last axis of ``a`` as one 2-D product."""
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))


def _unary(c: np.ndarray, lay: JetLayout, f0, f1, f2) -> np.ndarray:
    k = lay.k
    out = np.empty_like(c)
    out[0] = f0
    d1 = c[1:1 + k]
    out[1:1 + k] = f1 * d1
    if lay.n_pairs:
        out[1 + k:] = f1 * c[1 + k:] + f2 * (d1[lay.I] * d1[lay.J])
    return out


def _unary_vjp(g, c, lay: JetLayout, f1, f2, f3):
    k = lay.k
    d1 = c[1:1 + k]
    gc = np.empty_like(c)
    g1 = g[1:1 + k]
    gv = f1 * g[0]
    if k:
        gv = gv + f2 * np.sum(g1 * d1, axis=0)
    gc[1:1 + k] = f1 * g1
    if lay.n_pairs:
        g2 = g[1 + k:]
        d2 = c[1 + k:]
        gv = gv + np.sum(g2 * (f2 * d2 + f3 * (d1[lay.I] * d1[lay.J])), axis=0)
        gc[1:1 + k] += f2 * lay.scatter(g2 * d1[lay.J], g2 * d1[lay.I])
        gc[1 + k:] = f1 * g2
    gc[0] = gv
    return gc


def _mul(a: np.ndarray, b: np.ndarray, lay: JetLayout) -> np.ndarray:
    k = lay.k
    a0, b0 = a[0], b[0]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[0] = a0 * b0
    a1, b1 = a[1:1 + k], b[1:1 + k]
    out[1:1 + k] = a1 * b0 + a0 * b1
    if lay.n_pairs:
        I, J = lay.I, lay.J
        out[1 + k:] = a[1 + k:] * b0 + a0 * b[1 + k:] + a1[I] * b1[J] + a1[J] * b1[I]
    return out


def _mul_vjp_left(g, a, b, lay: JetLayout):
    """Gradient with respect to ``a`` of ``_mul(a, b)``."""
    k = lay.k
    b0 = b[0]
    ga = np.empty(np.broadcast_shapes(g.shape, a.shape))
    g0, g1 = g[0], g[1:1 + k]
    gv = g0 * b0 + np.sum(g1 * b[1:1 + k], axis=0) if k else g0 * b0
    ga[1:1 + k] = g1 * b0
    if lay.n_pairs:
        g2 = g[1 + k:]
        b1 = b[1:1 + k]
        gv = gv + np.sum(g2 * b[1 + k:], axis=0)
        # d(a1_I b1_J + a1_J b1_I)/d a1
        ga[1:1 + k] += lay.scatter(g2 * b1[lay.J], g2 * b1[lay.I])
        ga[1 + k:] = g2 * b0
    ga[0] = gv
    return ga


def _tanh_derivs(v):
    t = np.tanh(v)
    s = 1.0 - t * t
    return t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _sigmoid_derivs(v):
    s = _sigmoid(v)
    d1 = s * (1.0 - s)
    d2 = d1 * (1.0 - 2.0 * s)
    d3 = d1 * (1.0 - 6.0 * d1)
    return s, d1, d2, d3


def _exp_derivs(v):
    e = np.exp(v)
    return e, e, e, e


def _log_derivs(v):
    inv = 1.0 / v
    return np.log(v), inv, -inv * inv, 2.0 * inv ** 3


def _softplus_derivs(v, lam):
    lv = lam * v
    s = _sigmoid(lv)
    f0 = np.logaddexp(0.0, lv) / lam
    d1 = s
    d2 = lam * s * (1.0 - s)
    d3 = lam * lam * s * (1.0 - s) * (1.0 - 2.0 * s)
    return f0, d1, d2, d3


# ---------------------------------------------------------------------------
# forward-only jets


class Jet2:
    """Truncated second-order Taylor value over ``layout.k`` directions.

    ``val`` may be a scalar or an array; every channel shares that batch shape.
    """

    __slots__ = ("c", "layout")
    __array_priority__ = 100

    def __init__(self, c: np.ndarray, layout: JetLayout):
        c = np.asarray(c, dtype=np.float64)
        if c.shape[0] != layout.n_channels:
            raise ValueError(f"expected {layout.n_channels} channels, got {c.shape[0]}")
        self.c = c
        self.layout = layout

    # construction -------------------------------------------------------
    @classmethod
    def constant(cls, val, layout: JetLayout) -> "Jet2":
        val = np.asarray(val, dtype=np.float64)
        c = np.zeros((layout.n_channels,) + val.shape)
        c[0] = val
        return cls(c, layout)

    @classmethod
    def variable(cls, val, direction: Sequence[float] | np.ndarray, layout: JetLayout) -> "Jet2":
        val = np.asarray(val, dtype=np.float64)
        direction = np.asarray(direction, dtype=np.float64)
        c = np.zeros((layout.n_channels,) + val.shape)
        c[0] = val
        c[1:1 + layout.k] = direction.reshape((layout.k,) + (1,) * val.ndim)
        return cls(c, layout)

    # accessors ----------------------------------------------------------
    @property
    def val(self) -> np.ndarray:
        return self.c[0]

    @property
    def d1(self) -> np.ndarray:
        return self.c[1:1 + self.layout.k]

    @property
    def d2(self) -> np.ndarray:
        return self.c[1 + self.layout.k:]

    def second(self, i: int, j: int) -> np.ndarray:
        return self.c[self.layout.pair_slot(i, j)]

    def hessian(self) -> np.ndarray:
        """Full symmetric k x k matrix of second derivatives (needs all pairs stored)."""
        k = self.layout.k
        h = np.empty((k, k) + self.val.shape)
        for i in range(k):
            for j in range(i, k):
                h[i, j] = h[j, i] = self.second(i, j)
        return h

    # arithmetic ---------------------------------------------------------
    def _lift(self, other) -> "Jet2":
        if isinstance(other, Jet2):
            if other.layout != self.layout:
                raise ValueError("jet layouts differ")
            return other
        return Jet2.constant(other, self.layout)

    def __add__(self, other):
        if isinstance(other, Jet2):
            return Jet2(self._lift(other).c + self.c, self.layout)
        other = np.asarray(other, dtype=np.float64)
        shape = np.broadcast_shapes(self.val.shape, other.shape)
        c = np.broadcast_to(self.c, (self.c.shape[0],) + shape).copy()
        c[0] += other
        return Jet2(c, self.layout)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.c, self.layout)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            return Jet2(_mul(self.c, self._lift(other).c, self.layout), self.layout)
        return Jet2(self.c * np.asarray(other, dtype=np.float64), self.layout)

    __rmul__ = __mul__

    def reciprocal(self) -> "Jet2":
        v = self.val
        inv = 1.0 / v
        return Jet2(_unary(self.c, self.layout, inv, -inv * inv, 2.0 * inv ** 3), self.layout)

    def __truediv__(self, other):
        if isinstance(other, Jet2):
            return self * self._lift(other).reciprocal()
        return Jet2(self.c / np.asarray(other, dtype=np.float64), self.layout)

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def _apply(self, derivs) -> "Jet2":
        f0, f1, f2, _ = derivs(self.val)
        return Jet2(_unary(self.c, self.layout, f0, f1, f2), self.layout)

    def exp(self) -> "Jet2":
        return self._apply(_exp_derivs)

    def log(self) -> "Jet2":
        return self._apply(_log_derivs)

    def tanh(self) -> "Jet2":
        return self._apply(_tanh_derivs)

    def sigmoid(self) -> "Jet2":
        return self._apply(_sigmoid_derivs)

    def softplus(self, lam: float) -> "Jet2":
        """(1/lam) * log(1 + exp(lam * self)), evaluated without overflow."""
        return self._apply(lambda v: _softplus_derivs(v, lam))

    def __repr__(self) -> str:
        return f"Jet2(val={self.val!r}, d1={self.d1!r}, d2={self.d2!r})"


def jet_lift(x, directions) -> list[Jet2]:
    """Seed one jet per input coordinate.

    ``directions`` has one row per coordinate and one column per tangent
    direction; ``x`` entries may be scalars or equally-shaped arrays.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if directions.shape[0] != len(x):
        raise ValueError(f"directions has {directions.shape[0]} rows for {len(x)} inputs")
    lay = JetLayout(directions.shape[1])
    return [Jet2.variable(xi, directions[i], lay) for i, xi in enumerate(x)]


def jet_tanh(a: Jet2) -> Jet2:
    return a.tanh()


def jet_sum(jets: Sequence[Jet2]) -> Jet2:
    c = jets[0].c
    for j in jets[1:]:
        c = c + j.c
    return Jet2(c, jets[0].layout)


# ---------------------------------------------------------------------------
# reverse tape


class NotOnTape(ValueError):
    """The requested result was not produced on this tape."""


class Var:
    """Node on a :class:`Tape`. ``layout`` is set when the value is a jet."""

    __slots__ = ("value", "layout", "grad", "tape", "requires_grad", "__weakref__")

    def __init__(self, tape: "Tape", value: np.ndarray, layout: JetLayout | None, requires_grad: bool):
        self.tape = tape
        self.value = value
        self.layout = layout
        self.requires_grad = requires_grad
        self.grad = None

    def _acc(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        self.grad = g if self.grad is None else self.grad + g

    def jet(self) -> Jet2:
        return Jet2(self.value, self.layout)

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.rsub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Records jet-valued operations for one reverse sweep.

    With ``record=False`` the tape only evaluates (no closures kept), which
    is how trained networks are priced.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._ops: list[tuple[Var, Callable[[np.ndarray], None]]] = []
        self._ids: set[int] = set()

    # leaves --------------------------------------------------------------
    def param(self, value) -> Var:
        v = Var(self, np.asarray(value, dtype=np.float64), None, self.record)
        self._ids.add(id(v))
        return v

    def const(self, value, layout: JetLayout | None = None) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64), layout, False)

    def const_jet(self, jet: Jet2) -> Var:
        return Var(self, jet.c, jet.layout, False)

    def _out(self, value, layout, inputs: Sequence[Var], backward) -> Var:
        req = self.record and any(v.requires_grad for v in inputs)
        out = Var(self, value, layout, req)
        if req:
            self._ops.append((out, backward))
            self._ids.add(id(out))
        return out

    # jet operations ------------------------------------------------------
    def dense(self, terms: Sequence[tuple[Var, Var]], bias: Var | None = None) -> Var:
        """sum_t x_t @ W_t.T (+ bias on the value channel), applied channel-wise to jets."""
        x0 = terms[0][0]
        lay = x0.layout
        out = None
        for x, w in terms:
            y = _matmul_last(x.value, w.value.T)
            if out is None:
                out = y
            else:
                out += y
        if bias is not None:
            if lay is None:
                out = out + bias.value
            else:
                out[0] += bias.value
        inputs = [v for t in terms for v in t] + ([bias] if bias is not None else [])

        def backward(g):
            gf = g.reshape(-1, g.shape[-1])
            for x, w in terms:
                if w.requires_grad:
                    w._acc(gf.T @ x.value.reshape(-1, x.value.shape[-1]))
                if x.requires_grad:
                    x._acc(_matmul_last(g, w.value))
            if bias is not None and bias.requires_grad:
                g0 = g if lay is None else g[0]
                bias._acc(g0.reshape(-1, g0.shape[-1]).sum(axis=0))

        return self._out(out, lay, inputs, backward)

    def _unary(self, x: Var, derivs) -> Var:
        lay = x.layout
        if lay is None:
            f0, f1, _, _ = derivs(x.value)

            def backward(g):
                x._acc(g * f1)

            return self._out(f0, None, [x], backward)
        f0, f1, f2, f3 = derivs(x.value[0])
        val = _unary(x.value, lay, f0, f1, f2)

        def backward(g):
            x._acc(_unary_vjp(g, x.value, lay, f1, f2, f3))

        return self._out(val, lay, [x], backward)

    def tanh(self, x: Var) -> Var:
        return self._unary(x, _tanh_derivs)

    def sigmoid(self, x: Var) -> Var:
        return self._unary(x, _sigmoid_derivs)

    def exp(self, x: Var) -> Var:
        return self._unary(x, _exp_derivs)

    def mul(self, a: Var, b: Var) -> Var:
        if not isinstance(b, Var):
            b = self.const(b)
        lay = a.layout or b.layout
        if a.layout is not None and b.layout is not None:
            if a.layout != b.layout:
                raise ValueError("jet layouts differ")
            val = _mul(a.value, b.value, lay)

            def backward(g):
                if a.requires_grad:
                    a._acc(_mul_vjp_left(g, a.value, b.value, lay))
                if b.requires_grad:
                    b._acc(_mul_vjp_left(g, b.value, a.value, lay))

            return self._out(val, lay, [a, b], backward)
        if a.layout is None and b.layout is None:
            val = a.value * b.value

            def backward(g):
                a._acc(g * b.value)
                b._acc(g * a.value)

            return self._out(val, None, [a, b], backward)
        raise ValueError("cannot multiply a jet by a plain array on the tape; lift it first")

    def add(self, a: Var, b) -> Var:
        if not isinstance(b, Var):
            b = self.const(b)
        self._check_layouts(a, b)

        def backward(g):
            a._acc(g)
            b._acc(g)

        return self._out(a.value + b.value, a.layout or b.layout, [a, b], backward)

    def sub(self, a: Var, b) -> Var:
        if not isinstance(b, Var):
            b = self.const(b)
        self._check_layouts(a, b)

        def backward(g):
            a._acc(g)
            b._acc(-g)

        return self._out(a.value - b.value, a.layout or b.layout, [a, b], backward)

    def rsub(self, s: float, x: Var) -> Var:
        """s - x, with the scalar s acting on the value channel only."""
        val = -x.value
        if x.layout is None:
            val = val + s
        else:
            val[0] += s

        def backward(g):
            x._acc(-g)

        return self._out(val, x.layout, [x], backward)

    @staticmethod
    def _check_layouts(a: Var, b: Var) -> None:
        if a.layout != b.layout:
            raise ValueError("operands must both be jets of one layout or both plain")

    # reductions ----------------------------------------------------------
    def combine(self, x: Var, coef: np.ndarray) -> Var:
        """Channel contraction sum_c coef[c] * x[c]; yields a plain array."""
        coef = np.asarray(coef, dtype=np.float64)
        val = np.sum(coef * x.value, axis=0)

        def backward(g):
            x._acc(coef * g[None])

        return self._out(val, None, [x], backward)

    def square(self, x: Var) -> Var:
        if x.layout is not None:
            return self.mul(x, x)

        def backward(g):
            x._acc(2.0 * x.value * g)

        return self._out(x.value * x.value, None, [x], backward)

    def sum(self, x: Var, scale: float = 1.0) -> Var:
        def backward(g):
            x._acc(np.full_like(x.value, scale) * g)

        return self._out(np.asarray(scale * np.sum(x.value)), None, [x], backward)

    def mean(self, x: Var) -> Var:
        return self.sum(x, 1.0 / x.value.size)

    def scale(self, x: Var, s: float) -> Var:
        def backward(g):
            x._acc(s * g)

        return self._out(s * x.value, x.layout, [x], backward)

    # reverse sweep -------------------------------------------------------
    def backward(self, result: Var) -> None:
        if result.tape is not self or (result.requires_grad and id(result) not in self._ids):
            raise NotOnTape("result was not recorded on this tape")
        if not self.record:
            raise NotOnTape("tape was created with record=False")
        if np.size(result.value) != 1:
            raise ValueError("backward needs a scalar result")
        if not result.requires_grad:
            return
        result.grad = np.ones_like(result.value)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)

    def zero_grad(self) -> None:
        for out, _ in self._ops:
            out.grad = None

    def release(self) -> None:
        """Drop the recorded ops; their closures form cycles that would pin large arrays."""
        self._ops.clear()
        self._ids.clear()


def param_gradient(tape: Tape, result: Var, params: Sequence[Var]) -> np.ndarray:
    """Gradient of a scalar taped result with respect to ``params``, concatenated."""
    tape.backward(result)
    parts = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        parts.append(np.ravel(g))
    tape.release()
    return np.concatenate(parts) if parts else np.zeros(0)
