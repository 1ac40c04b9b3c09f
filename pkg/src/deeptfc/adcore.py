"""Nested differentiation engine.

A :class:`DiffScalar` is a batch of independent scalars, each carried as a
truncated multivariate Taylor polynomial in a set of perturbation *slots*
(one per differentiated input, plus fresh slots created for boundary
derivatives).  Every Taylor coefficient array is a node on a reverse-mode
tape, so any quantity built from input derivatives can be differentiated
once more with respect to registered parameters.

Storage layout: ``value`` has shape ``(C, *batch)`` where axis 0 enumerates
the retained monomials (``channels``); channel 0 is always the constant
term when present.  Coefficients are Taylor coefficients, i.e. the channel
for ``x**2`` holds ``f_xx / 2``.

Which monomials are retained is decided by a monomial ideal (``ideal``):
products landing in the ideal are dropped.  Seeding with ``order=2`` on
slots ``x`` and ``y`` uses the ideal ``(x**3, y**3, x*y)``, so only pure
partials up to second order are propagated.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "DiffScalar",
    "Jet",
    "NonFiniteError",
    "UnsupportedOperationError",
    "UnsupportedOrderError",
    "MAX_INPUT_ORDER",
    "affine",
    "coefficient",
    "derivative",
    "elementary_set",
    "eval_jet",
    "exp",
    "label",
    "param_gradient",
    "parameter",
    "perturb",
    "seed",
    "sigmoid",
    "stack",
    "tanh",
]

# input derivative orders above this are outside the engine's contract
MAX_INPUT_ORDER = 2


class NonFiniteError(ArithmeticError):
    """A primitive produced inf or nan."""

    def __init__(self, op, context=None, index=None):
        self.op = op
        self.context = context
        self.index = index
        where = f" in {context}" if context else ""
        at = f" at batch index {index}" if index is not None else ""
        super().__init__(f"non-finite value produced by '{op}'{where}{at}")


class UnsupportedOperationError(TypeError):
    pass


class UnsupportedOrderError(ValueError):
    pass


_label: contextvars.ContextVar[str | None] = contextvars.ContextVar("adcore_label", default=None)


@contextlib.contextmanager
def label(text):
    """Tag every primitive created inside the block, for error messages."""
    outer = _label.get()
    token = _label.set(text if outer is None else f"{outer} / {text}")
    try:
        yield
    finally:
        _label.reset(token)


# ---------------------------------------------------------------------------
# monomial bookkeeping
# ---------------------------------------------------------------------------

_ONE = ()
_SCALAR_CHANNELS = (_ONE,)
_NO_IDEAL = frozenset()
_fresh_slots = itertools.count(-1, -1)


def _mono_mul(a, b):
    if not a:
        return b
    if not b:
        return a
    d = dict(a)
    for s, o in b:
        d[s] = d.get(s, 0) + o
    return tuple(sorted(d.items()))


def _degree(m):
    return sum(o for _, o in m)


def _divides(g, m):
    dm = dict(m)
    return all(dm.get(s, 0) >= o for s, o in g)


def _in_ideal(m, ideal):
    return any(_divides(g, m) for g in ideal)


def _minimal(gens):
    gens = set(gens)
    return frozenset(g for g in gens if not any(h != g and _divides(h, g) for h in gens))


@lru_cache(maxsize=4096)
def _ideal_union(i1, i2):
    if not i1:
        return i2
    if not i2 or i1 == i2:
        return i1
    return _minimal(i1 | i2)


def _canon(monos):
    return tuple(sorted(set(monos), key=lambda m: (_degree(m), m)))


@lru_cache(maxsize=4096)
def _product_table(A, B, ideal):
    """Output channels and (ia, ib, k) triples for a truncated product."""
    raw = []
    for ia, ma in enumerate(A):
        for ib, mb in enumerate(B):
            m = _mono_mul(ma, mb)
            if not _in_ideal(m, ideal):
                raw.append((ia, ib, m))
    K = _canon(m for _, _, m in raw)
    pos = {m: k for k, m in enumerate(K)}
    return K, tuple((ia, ib, pos[m]) for ia, ib, m in raw)


@lru_cache(maxsize=4096)
def _merge(A, B, ideal):
    K = _canon(m for m in A + B if not _in_ideal(m, ideal))
    pos = {m: k for k, m in enumerate(K)}
    ia = [(i, pos[m]) for i, m in enumerate(A) if m in pos]
    ib = [(i, pos[m]) for i, m in enumerate(B) if m in pos]
    return K, tuple(ia), tuple(ib)


@lru_cache(maxsize=4096)
def _extract_plan(channels, ideal, slot, order):
    quotient = _minimal(
        tuple(s_o for s_o in g if s_o[0] != slot)
        for g in ideal
        if dict(g).get(slot, 0) <= order
    )
    if _ONE in quotient:
        raise UnsupportedOrderError(
            f"order {order} in slot {slot} was truncated; seed with a higher order"
        )
    picks = []
    for i, m in enumerate(channels):
        if dict(m).get(slot, 0) == order:
            rest = tuple(so for so in m if so[0] != slot)
            if not _in_ideal(rest, quotient):
                picks.append((i, rest))
    picks.sort(key=lambda p: (_degree(p[1]), p[1]))
    return tuple(m for _, m in picks), tuple(i for i, _ in picks), quotient


# ---------------------------------------------------------------------------
# tape node
# ---------------------------------------------------------------------------


def _check(value, op):
    with np.errstate(invalid="ignore", over="ignore"):
        total = np.sum(value)
    if np.isfinite(total):
        return
    bad = ~np.isfinite(value)
    if not bad.any():
        return
    idx = np.argwhere(bad)[0]
    raise NonFiniteError(op, _label.get(), tuple(int(i) for i in idx[1:]))


def _pad(v, nbatch):
    extra = nbatch - (v.ndim - 1)
    if extra <= 0:
        return v
    return v.reshape(v.shape[:1] + (1,) * extra + v.shape[1:])


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(1, 1 + extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class DiffScalar:
    """Batch of independent differentiable scalars (see module docstring)."""

    __slots__ = ("value", "channels", "ideal", "parents", "vjp", "op", "tracked")
    __array_priority__ = 1000

    def __init__(self, value, channels=_SCALAR_CHANNELS, ideal=_NO_IDEAL,
                 parents=(), vjp=None, op="const", tracked=None):
        self.value = value
        self.channels = channels
        self.ideal = ideal
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.tracked = bool(parents) if tracked is None else tracked

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.value.shape[1:]

    @property
    def slots(self):
        return sorted({s for m in self.channels for s, _ in m})

    @property
    def primal(self):
        """Plain value (Taylor constant term) as an ndarray."""
        if self.channels and self.channels[0] == _ONE:
            return self.value[0]
        return np.zeros(self.shape)

    def __repr__(self):
        return f"DiffScalar(op={self.op!r}, shape={self.shape}, slots={self.slots})"

    def __float__(self):
        if self.channels != _SCALAR_CHANNELS:
            raise TypeError("DiffScalar carries derivative channels; use .primal")
        return float(self.primal.reshape(()))

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return _add(self, other, 1.0)

    def __radd__(self, other):
        return _add(self, other, 1.0)

    def __sub__(self, other):
        return _add(self, other, -1.0)

    def __rsub__(self, other):
        return _add(_lift(other), self, -1.0)

    def __neg__(self):
        return _scale(self, -1.0)

    def __pos__(self):
        return self

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, DiffScalar):
            return _mul(self, _unary(other, _Power(-1.0)))
        return _mul(self, 1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return _mul(_unary(self, _Power(-1.0)), other)

    def __pow__(self, exponent):
        if isinstance(exponent, DiffScalar):
            raise UnsupportedOperationError("power requires a constant exponent")
        exponent = float(exponent)
        if exponent == 0.0:
            return DiffScalar(np.ones((1,) + self.shape))
        if exponent == 1.0:
            return self
        if exponent == 2.0:
            return _mul(self, self)
        return _unary(self, _Power(exponent))

    def __rpow__(self, base):
        base = float(base)
        if base <= 0:
            raise UnsupportedOperationError("constant ** DiffScalar needs a positive base")
        return exp(self * math.log(base))

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            raise UnsupportedOperationError(f"{ufunc.__name__}.{method} is not supported")
        fn = _UFUNCS.get(ufunc.__name__)
        if fn is None:
            raise UnsupportedOperationError(
                f"'{ufunc.__name__}' is not an elementary operation; see elementary_set()"
            )
        return fn(*inputs)

    # -- structure ---------------------------------------------------------

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        full = (slice(None),) + idx
        shape = self.value.shape

        basic = all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in idx)

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[full] = g
            else:
                np.add.at(out, full, g)
            return (out,)

        return _node(self.value[full], self.channels, self.ideal, (self,), vjp, "getitem")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.value.shape
        return _node(self.value.reshape((old[0],) + tuple(shape)), self.channels,
                     self.ideal, (self,), lambda g: (g.reshape(old),), "reshape")

    def sum(self, axis=None):
        """Sum over batch axes (derivative channels commute with the sum)."""
        nd = self.value.ndim
        if axis is None:
            axes = tuple(range(1, nd))
        else:
            axes = tuple(a + 1 if a >= 0 else nd + a for a in np.atleast_1d(axis))
        shape = self.value.shape

        def vjp(g):
            return (np.broadcast_to(np.expand_dims(g, axes), shape),)

        return _node(self.value.sum(axis=axes), self.channels, self.ideal, (self,), vjp, "sum")

    def d(self, slot, order=1):
        """Partial derivative in ``slot`` as a new DiffScalar."""
        return derivative(self, slot, order)


def _node(value, channels, ideal, parents, vjp, op):
    _check(value, op)
    tracked = tuple(p for p in parents if isinstance(p, DiffScalar) and p.tracked)
    if not tracked:
        return DiffScalar(value, channels, ideal, op=op)
    # vjp always returns one gradient per *original* parent; keep the mask
    mask = tuple(isinstance(p, DiffScalar) and p.tracked for p in parents)
    if all(mask):
        return DiffScalar(value, channels, ideal, tracked, vjp, op)

    def masked(g, _vjp=vjp, _mask=mask):
        return tuple(gi for gi, m in zip(_vjp(g), _mask) if m)

    return DiffScalar(value, channels, ideal, tracked, masked, op)


def _lift(x):
    if isinstance(x, DiffScalar):
        return x
    return DiffScalar(np.asarray(x, dtype=float)[None])


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _add(a, b, sign):
    a = _lift(a)
    b = _lift(b)
    if a.channels == b.channels and a.ideal == b.ideal:
        nb = max(a.value.ndim, b.value.ndim) - 1
        av, bv = _pad(a.value, nb), _pad(b.value, nb)
        value = av + bv if sign > 0 else av - bv
        sa, sb = a.value.shape, b.value.shape

        def vjp(g):
            gb = _unbroadcast(g, sb)
            return _unbroadcast(g, sa), (gb if sign > 0 else -gb)

        return _node(value, a.channels, a.ideal, (a, b), vjp, "add" if sign > 0 else "sub")

    ideal = _ideal_union(a.ideal, b.ideal)
    K, ia, ib = _merge(a.channels, b.channels, ideal)
    batch = np.broadcast_shapes(a.shape, b.shape)
    value = np.zeros((len(K),) + batch)
    for i, k in ia:
        value[k] += a.value[i]
    for i, k in ib:
        value[k] += sign * b.value[i]
    sa, sb = a.value.shape, b.value.shape

    def vjp(g):
        ga = np.zeros((sa[0],) + g.shape[1:])
        gb = np.zeros((sb[0],) + g.shape[1:])
        for i, k in ia:
            ga[i] = g[k]
        for i, k in ib:
            gb[i] = sign * g[k]
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _node(value, K, ideal, (a, b), vjp, "add" if sign > 0 else "sub")


def _scale(a, c):
    return _node(a.value * c, a.channels, a.ideal, (a,), lambda g: (g * c,), "scale")


def _mul(a, b):
    if not isinstance(b, DiffScalar):
        b = np.asarray(b, dtype=float)
        if b.ndim == 0:
            return _scale(a, float(b))
        b = _lift(b)
    a = _lift(a)
    # slotless operand times anything: one broadcast multiply
    for s, t in ((a, b), (b, a)):
        if s.channels == _SCALAR_CHANNELS and _keeps_channels(s, t):
            nb = max(s.value.ndim, t.value.ndim) - 1
            sv, tv = _pad(s.value, nb), _pad(t.value, nb)
            value = sv * tv
            ss, st = s.value.shape, t.value.shape

            def vjp(g, s=s, sv=sv, tv=tv, ss=ss, st=st):
                gs = _unbroadcast((g * tv).sum(axis=0, keepdims=True), ss)
                gt = _unbroadcast(g * sv, st)
                return (gs, gt) if s is a else (gt, gs)

            return _node(value, t.channels, _ideal_union(s.ideal, t.ideal), (a, b), vjp, "mul")

    ideal = _ideal_union(a.ideal, b.ideal)
    K, triples = _product_table(a.channels, b.channels, ideal)
    value = np.zeros((len(K),) + np.broadcast_shapes(a.shape, b.shape))
    av, bv = a.value, b.value
    for ia, ib, k in triples:
        value[k] += av[ia] * bv[ib]
    sa, sb = av.shape, bv.shape

    def vjp(g):
        ga = np.zeros((sa[0],) + g.shape[1:])
        gb = np.zeros((sb[0],) + g.shape[1:])
        for ia, ib, k in triples:
            ga[ia] += g[k] * bv[ib]
            gb[ib] += g[k] * av[ia]
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _node(value, K, ideal, (a, b), vjp, "mul")


def _keeps_channels(s, t):
    if not s.ideal or s.ideal == t.ideal:
        return True
    u = _ideal_union(s.ideal, t.ideal)
    return not any(_in_ideal(m, u) for m in t.channels)


class _Elementary:
    name = "?"

    def derivatives(self, x0, n):
        """[f(x0), f'(x0), ..., f^(n)(x0)]"""
        raise NotImplementedError


class _PolyChain(_Elementary):
    """f with f' = poly(f); higher derivatives are polynomials in f."""

    def __init__(self, name, fn, dpoly):
        self.name = name
        self.fn = fn
        self.dpoly = np.polynomial.Polynomial(dpoly)
        self._polys = [np.polynomial.Polynomial([0.0, 1.0])]

    def poly(self, i):
        while len(self._polys) <= i:
            p = self._polys[-1]
            self._polys.append(p.deriv() * self.dpoly)
        return self._polys[i]

    def derivatives(self, x0, n):
        y = self.fn(x0)
        out = [y]
        for i in range(1, n + 1):
            c = self.poly(i).coef
            acc = np.full_like(y, c[-1])
            for ci in c[-2::-1]:
                acc *= y
                acc += ci
            out.append(acc)
        return out


class _Exp(_Elementary):
    name = "exp"

    def derivatives(self, x0, n):
        e = np.exp(x0)
        return [e] * (n + 1)


class _Power(_Elementary):
    def __init__(self, p):
        self.p = p
        self.name = f"pow({p:g})"

    def derivatives(self, x0, n):
        p = self.p
        integral = p == int(p)
        out = []
        coef = 1.0
        for i in range(n + 1):
            if integral and p >= 0 and i > p:
                out.append(np.zeros_like(x0))
            else:
                e = p - i
                base = np.power(x0, int(e)) if integral and e >= 0 else np.power(x0, e)
                out.append(coef * base)
            coef *= p - i
        return out


class _Tanh(_PolyChain):
    def __init__(self):
        super().__init__("tanh", np.tanh, [1.0, 0.0, -1.0])

    def derivatives(self, x0, n):
        if n > 3:
            return super().derivatives(x0, n)
        t = np.tanh(x0)
        t2 = t * t
        u = 1.0 - t2
        out = [t, u]
        if n >= 2:
            d2 = t * u
            d2 *= -2.0
            out.append(d2)
        if n >= 3:
            d3 = t2 * 6.0
            d3 -= 2.0
            d3 *= u
            out.append(d3)
        return out[: n + 1]


_TANH = _Tanh()


def _sigmoid_fn(x):
    # split form avoids overflow warnings in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Sigmoid(_PolyChain):
    def __init__(self):
        super().__init__("sigmoid", _sigmoid_fn, [0.0, 1.0, -1.0])

    def derivatives(self, x0, n):
        if n > 3:
            return super().derivatives(x0, n)
        s = _sigmoid_fn(x0)
        d1 = s * (1.0 - s)
        out = [s, d1]
        if n >= 2:
            d2 = s * -2.0
            d2 += 1.0
            d2 *= d1
            out.append(d2)
        if n >= 3:
            d3 = d1 * -6.0
            d3 += 1.0
            d3 *= d1
            out.append(d3)
        return out[: n + 1]


_SIGMOID = _Sigmoid()
_EXP = _Exp()


class _Acc:
    """Channel-stacked accumulator that writes products in place."""

    def __init__(self, n, shape):
        self.arr = np.empty((n,) + shape)
        self.filled = [False] * n
        self._tmp = None

    def set(self, k, x):
        self.arr[k] = x
        self.filled[k] = True

    def add_prod(self, k, x, y):
        if not self.filled[k]:
            # slice keeps a view even for 0-d batches
            np.multiply(x, y, out=self.arr[k:k + 1].reshape(self.arr.shape[1:]))
            self.filled[k] = True
            return
        if self._tmp is None:
            self._tmp = np.empty(self.arr.shape[1:])
        np.multiply(x, y, out=self._tmp)
        self.arr[k] += self._tmp

    def done(self):
        for k, f in enumerate(self.filled):
            if not f:
                self.arr[k] = 0.0
        return self.arr


def _unary(a, fn):
    # non-finite results are reported by _check, not by numpy warnings
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return _unary_impl(a, fn)


def _unary_impl(a, fn):
    a = _lift(a)
    A = a.channels
    ideal = a.ideal
    shape = a.shape
    has_one = A[0] == _ONE
    x0 = a.value[0] if has_one else np.zeros(shape)
    D_ch = A[1:] if has_one else A
    dv = a.value[1:] if has_one else a.value

    powers = []  # (channels, values) of delta**j, j >= 1
    if D_ch:
        if not ideal:
            raise UnsupportedOrderError(f"{fn.name}: input has derivative channels but no truncation")
        cur = (D_ch, dv)
        while cur[0]:
            powers.append(cur)
            if len(powers) > 16:
                raise UnsupportedOrderError(f"{fn.name}: truncation does not bound the expansion")
            K, triples = _product_table(cur[0], D_ch, ideal)
            if not K:
                break
            acc = _Acc(len(K), shape)
            for i1, i2, k in triples:
                acc.add_prod(k, cur[1][i1], dv[i2])
            cur = (K, acc.done())
    D = len(powers)
    derivs = fn.derivatives(x0, D + 1)

    K = _canon([_ONE] + [m for ch, _ in powers for m in ch])
    pos = {m: k for k, m in enumerate(K)}
    out = _Acc(len(K), shape)
    out.set(0, derivs[0])
    # Q = f'(a) expanded in the same algebra; its adjoint product is the vjp
    Q = _Acc(len(K), shape)
    Q.set(0, derivs[1])
    fact = 1.0
    for j, (ch, pv) in enumerate(powers, start=1):
        fact *= j
        cj = derivs[j] if fact == 1.0 else derivs[j] * (1.0 / fact)
        qj = derivs[j + 1] if fact == 1.0 else derivs[j + 1] * (1.0 / fact)
        for i, m in enumerate(ch):
            out.add_prod(pos[m], cj, pv[i])
            Q.add_prod(pos[m], qj, pv[i])
    out = out.done()
    _check(out, fn.name)

    if not a.tracked:
        return DiffScalar(out, K, ideal, op=fn.name)

    Qv = Q.done()
    _, triples = _product_table(A, K, ideal)
    kmap = _product_table_out_map(A, K, ideal, K)
    triples = tuple((ia, iq, kmap[k]) for ia, iq, k in triples if kmap[k] >= 0)
    nA = len(A)

    def vjp(g):
        ga = _Acc(nA, shape)
        for ia, iq, kk in triples:
            ga.add_prod(ia, Qv[iq], g[kk])
        return (ga.done(),)

    return DiffScalar(out, K, ideal, (a,), vjp, fn.name)


@lru_cache(maxsize=4096)
def _product_table_out_map(A, B, ideal, target):
    K, _ = _product_table(A, B, ideal)
    pos = {m: k for k, m in enumerate(target)}
    return tuple(pos.get(m, -1) for m in K)


def exp(x):
    return _unary(x, _EXP) if isinstance(x, DiffScalar) else np.exp(x)


def tanh(x):
    return _unary(x, _TANH) if isinstance(x, DiffScalar) else np.tanh(x)


def sigmoid(x):
    if isinstance(x, DiffScalar):
        return _unary(x, _SIGMOID)
    return _sigmoid_fn(np.atleast_1d(np.asarray(x, dtype=float))).reshape(np.shape(x))


def _pow_ufunc(base, exponent):
    if isinstance(base, DiffScalar):
        return base ** exponent
    return exponent.__rpow__(base)


_UFUNCS = {
    "add": lambda a, b: _add(_lift(a), b, 1.0),
    "subtract": lambda a, b: _add(_lift(a), b, -1.0),
    "multiply": lambda a, b: _mul(_lift(a), b),
    "true_divide": lambda a, b: _lift(a) / b,
    "negative": lambda a: -a,
    "positive": lambda a: a,
    "exp": exp,
    "tanh": tanh,
    "power": _pow_ufunc,
    "square": lambda a: a * a,
}


def elementary_set():
    """Names of the supported primitives."""
    return ["add", "sub", "mul", "div", "neg", "pow", "exp", "tanh", "sigmoid"]


def affine(x, W, b=None):
    """Batched ``x @ W + b`` on the last axis; W and b must be slotless.

    The bias only enters the constant Taylor term.
    """
    x = _lift(x)
    W = _lift(W)
    if W.channels != _SCALAR_CHANNELS or (b is not None and _lift(b).channels != _SCALAR_CHANNELS):
        raise UnsupportedOperationError("affine weights must not carry input derivatives")
    xv = x.value
    Wm = W.value[0]
    n_in, n_out = Wm.shape
    flat = xv.reshape(-1, n_in)
    value = (flat @ Wm).reshape(xv.shape[:-1] + (n_out,))
    if b is not None:
        b = _lift(b)
        if x.channels[0] == _ONE:
            value[0] += b.value[0]
            channels = x.channels
        else:
            value = np.concatenate([np.broadcast_to(b.value, (1,) + value.shape[1:]), value])
            channels = (_ONE,) + x.channels
    else:
        channels = x.channels
    parents = (x, W) if b is None else (x, W, b)

    def vjp(g):
        gb = g if channels is x.channels else g[1:]
        g2 = gb.reshape(-1, n_out)
        gx = (g2 @ Wm.T).reshape(xv.shape)
        gW = (flat.T @ g2)[None]
        if b is None:
            return gx, gW
        gbias = g[0].reshape(-1, n_out).sum(axis=0)[None]
        return gx, gW, gbias

    _check(value, "affine")
    if not any(isinstance(p, DiffScalar) and p.tracked for p in parents):
        return DiffScalar(value, channels, x.ideal, op="affine")
    return _node(value, channels, x.ideal, parents, vjp, "affine")


def stack(items, axis=-1):
    """Stack scalars (DiffScalars or numbers) along a new trailing batch axis."""
    if axis != -1:
        raise NotImplementedError("only axis=-1 is supported")
    items = [_lift(v) for v in items]
    ideal = _NO_IDEAL
    for v in items:
        ideal = _ideal_union(ideal, v.ideal)
    K = _canon(m for v in items for m in v.channels if not _in_ideal(m, ideal))
    if _ONE not in K:
        K = _canon(K + (_ONE,))
    pos = {m: k for k, m in enumerate(K)}
    batch = np.broadcast_shapes(*(v.shape for v in items))
    value = np.zeros((len(K),) + batch + (len(items),))
    maps = []
    for j, v in enumerate(items):
        mp = [(i, pos[m]) for i, m in enumerate(v.channels) if m in pos]
        maps.append(mp)
        for i, k in mp:
            value[k, ..., j] = v.value[i]
    shapes = [v.value.shape for v in items]

    def vjp(g):
        out = []
        for j, (mp, sh) in enumerate(zip(maps, shapes)):
            gj = np.zeros((sh[0],) + batch)
            for i, k in mp:
                gj[i] = g[k, ..., j]
            out.append(_unbroadcast(gj, sh))
        return tuple(out)

    return _node(value, K, ideal, tuple(items), vjp, "stack")


def coefficient(x, slot, order):
    """Taylor coefficient of ``slot**order`` as a function of the other slots."""
    if not isinstance(x, DiffScalar):
        return x if order == 0 else np.zeros_like(np.asarray(x, dtype=float))
    K, picks, ideal = _extract_plan(x.channels, x.ideal, slot, order)
    if not K:
        return DiffScalar(np.zeros((1,) + x.shape), op="coefficient")
    shape = x.value.shape
    picks_l = list(picks)

    def vjp(g):
        out = np.zeros(shape)
        out[picks_l] = g
        return (out,)

    return _node(x.value[picks_l], K, ideal, (x,), vjp, "coefficient")


def derivative(x, slot, order=1):
    c = coefficient(x, slot, order)
    return c * float(math.factorial(order)) if order > 1 else c


# ---------------------------------------------------------------------------
# seeding, jets and gradients
# ---------------------------------------------------------------------------


def _check_order(order):
    if not 0 <= order <= MAX_INPUT_ORDER:
        raise UnsupportedOrderError(
            f"input derivative order {order} outside supported range 0..{MAX_INPUT_ORDER}"
        )


def seed(point, orders):
    """Independent-variable DiffScalars for a point (or batch of points).

    ``point`` has shape ``(n,)`` or ``(N, n)``; ``orders`` maps input index to
    the highest pure derivative order to propagate.  Inputs not in ``orders``
    are returned as plain arrays.  Mixed partials between seeded inputs are
    truncated.
    """
    point = np.asarray(point, dtype=float)
    n = point.shape[-1]
    for k, o in orders.items():
        if not 0 <= k < n:
            raise ValueError(f"slot {k} out of range for {n} inputs")
        _check_order(o)
    live = sorted(k for k, o in orders.items() if o > 0)
    gens = [((k, orders[k] + 1),) for k in live]
    gens += [((k, 1), (l, 1)) for k, l in itertools.combinations(live, 2)]
    ideal = frozenset(gens)
    out = []
    for k in range(n):
        col = point[..., k]
        if k in live:
            v = np.stack([col, np.ones_like(col)])
            out.append(DiffScalar(v, (_ONE, ((k, 1),)), ideal, op="seed"))
        else:
            out.append(col)
    return out


def perturb(p, order):
    """``p + eps`` in a fresh slot, truncated after ``eps**order``.

    Returns ``(value, slot)``.
    """
    _check_order(order)
    slot = next(_fresh_slots)
    v = np.array([float(p), 1.0])
    ideal = frozenset({((slot, order + 1),)})
    return DiffScalar(v, (_ONE, ((slot, 1),)), ideal, op="perturb"), slot


def parameter(theta):
    """Register a flat parameter array as a differentiable leaf."""
    theta = np.asarray(theta, dtype=float)
    return DiffScalar(theta[None].copy(), op="param", tracked=True)


@dataclass
class Jet:
    """Value, first partials and pure second partials at a point."""

    value: np.ndarray | float
    first: dict
    second_pure: dict


def eval_jet(program, point, slots):
    point = np.asarray(point, dtype=float)
    n = point.shape[-1]
    slots = sorted(set(slots))
    if any(not 0 <= s < n for s in slots):
        raise ValueError(f"slots {slots} out of range for {n} inputs")
    xs = seed(point, {s: 2 for s in slots})
    out = program(*xs)
    if not isinstance(out, DiffScalar):
        out = _lift(np.broadcast_to(np.asarray(out, dtype=float), point.shape[:-1]))
    value = _as_out(out.primal)
    first = {s: _as_out(_primal(coefficient(out, s, 1))) for s in slots}
    second = {s: _as_out(2.0 * _primal(coefficient(out, s, 2))) for s in slots}
    return Jet(value, first, second)


def _primal(x):
    return x.primal if isinstance(x, DiffScalar) else np.asarray(x, dtype=float)


def _as_out(v):
    v = np.asarray(v, dtype=float)
    return float(v) if v.ndim == 0 else v


def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root, seed_grad=None):
    """Reverse sweep; returns {id(leaf): gradient} for tracked leaves."""
    if seed_grad is None:
        seed_grad = np.zeros_like(root.value)
        if root.channels[0] != _ONE:
            return {}
        seed_grad[0] = 1.0
    grads = {id(root): seed_grad}
    leaves = {}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            leaves[id(node)] = g
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return leaves


def param_gradient(scalar, params):
    """Gradient of a single scalar with respect to parameter leaf(s).

    ``params`` is a leaf from :func:`parameter` or a sequence of them; the
    result has the same length (concatenated for a sequence).
    """
    many = isinstance(params, (list, tuple))
    leaves = list(params) if many else [params]
    for p in leaves:
        if not isinstance(p, DiffScalar) or p.op != "param":
            raise ValueError("params must be leaves created by adcore.parameter")
    if not isinstance(scalar, DiffScalar):
        grads = {}
    else:
        if int(np.prod(scalar.shape)) != 1:
            raise ValueError(f"expected a single scalar, got batch shape {scalar.shape}")
        grads = backward(scalar) if scalar.tracked else {}
    out = [grads.get(id(p), np.zeros_like(p.value))[0].reshape(p.value.shape[1:]) for p in leaves]
    return np.concatenate([o.ravel() for o in out]) if many else out[0]
