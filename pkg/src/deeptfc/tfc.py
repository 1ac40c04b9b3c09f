"""Constrained expressions on coordinate hyperplanes.

A constrained expression has the form

    f(x) = g(x) + sum_I M_I(c - g)(x) * v_1[i_1](x_1) * ... * v_n[i_n](x_n)

where the sum runs over every multi-index ``I`` of the M tensor except the
all-zero one.  ``M_I(h)`` applies the boundary operators selected by ``I`` to
``h`` and carries the sign ``(-1)**(m+1)`` for ``m`` selected operators.  The
v vectors are chosen so that each boundary operator picks out exactly one
entry, which makes every constraint hold for any free function ``g``.

Functions of ``n`` variables are called positionally, ``F(*xs)``, where each
``xs[k]`` is a float, an ndarray or an :class:`adcore.DiffScalar`.

Indices are 0-based throughout: index 0 in a dimension is the trivial slot
(the constant entry of the v vector), index ``j >= 1`` is the ``j``-th
constraint of that dimension.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import adcore, mlp

COND_LIMIT = 1e12
EXACTNESS_TOL = 1e-10


class IllConditionedError(ValueError):
    pass


class MissingConstraintError(KeyError):
    def __init__(self, missing):
        self.missing = missing
        text = "; ".join(
            "{" + ", ".join(f"(k={op.k}, d={op.d}, p={op.p:g})" for op in ops) + "}" for ops in missing
        )
        super().__init__(f"constraint function lacks restrictions for: {text}")

    def __str__(self):
        return self.args[0]


# ---------------------------------------------------------------------------
# boundary operators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class BoundaryOperator:
    """d-th derivative in x_k, then restriction to x_k = p."""

    k: int
    p: float
    d: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", float(self.p))
        if self.k < 0 or self.d < 0:
            raise ValueError(f"invalid boundary operator {self}")

    def __call__(self, F):
        return apply_boundary_op(self, F)

    def __str__(self):
        return f"b[k={self.k}, p={self.p:g}, d={self.d}]"


def _project(F, xs, where):
    """Evaluate F with x_k replaced by p (+ a perturbation when derivatives are needed).

    ``where`` maps k -> (p, max_order).  Returns the raw output and the
    perturbation slot per k (None for plain substitution).
    """
    xs = list(xs)
    slots = {}
    for k, (p, order) in where.items():
        if order == 0:
            xs[k] = p
            slots[k] = None
        else:
            xs[k], slots[k] = adcore.perturb(p, order)
    return F(*xs), slots


def _extract(out, slots, orders):
    """Apply d-th derivative extraction for each projected dimension."""
    scale = 1.0
    for k, d in orders.items():
        if d == 0:
            if slots[k] is None:
                continue
            out = adcore.coefficient(out, slots[k], 0)
        else:
            out = adcore.coefficient(out, slots[k], d)
            scale *= math.factorial(d)
    return out * scale if scale != 1.0 else out


def apply_boundary_ops(ops, F):
    """Nested boundary operators (distinct dimensions) as a new function."""
    ops = tuple(sorted(ops))
    if len({op.k for op in ops}) != len(ops):
        raise ValueError(f"boundary operators must act on distinct dimensions: {ops}")
    for op in ops:
        if op.d > adcore.MAX_INPUT_ORDER:
            raise adcore.UnsupportedOrderError(
                f"{op}: derivative order {op.d} exceeds the supported maximum {adcore.MAX_INPUT_ORDER}"
            )
    where = {op.k: (op.p, op.d) for op in ops}
    orders = {op.k: op.d for op in ops}

    def G(*xs):
        out, slots = _project(F, xs, where)
        return _extract(out, slots, orders)

    return G


def apply_boundary_op(op: BoundaryOperator, F):
    return apply_boundary_ops((op,), F)


# ---------------------------------------------------------------------------
# constraint specification and constraint function
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSpec:
    """Constraints on dimension ``k`` as (location, derivative order) pairs."""

    k: int
    entries: tuple = ()

    def __post_init__(self):
        entries = tuple((float(p), int(d)) for p, d in self.entries)
        if len(set(entries)) != len(entries):
            raise ValueError(f"duplicate (p, d) pairs in dimension {self.k}: {entries}")
        if any(d < 0 for _, d in entries):
            raise ValueError(f"negative derivative order in dimension {self.k}")
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    @property
    def ops(self):
        return tuple(BoundaryOperator(self.k, p, d) for p, d in self.entries)


def _required_sets(specs):
    """All non-empty operator sets that index M-tensor elements."""
    per_dim = [(None,) + s.ops for s in specs]
    out = []
    for combo in itertools.product(*per_dim):
        ops = frozenset(op for op in combo if op is not None)
        if ops:
            out.append(ops)
    return out


class ConstraintFunction:
    """Constraint data as hyperplane restrictions of c.

    ``restrictions`` maps a frozenset of boundary operators to a function of
    all ``n`` variables giving those operators applied to c.  Only the sets
    reached by the M tensor are needed.
    """

    def __init__(self, n, restrictions):
        self.n = n
        self.restrictions = {frozenset(k): v for k, v in restrictions.items()}

    def __getitem__(self, ops):
        return self.restrictions[frozenset(ops)]

    def __contains__(self, ops):
        return frozenset(ops) in self.restrictions

    def missing(self, specs):
        return [ops for ops in _required_sets(specs) if ops not in self.restrictions]

    @classmethod
    def from_function(cls, c, specs):
        """Every restriction derived from a global c by differentiation."""
        n = len(specs)
        return cls(n, {ops: apply_boundary_ops(ops, c) for ops in _required_sets(specs)})

    @classmethod
    def from_pieces(cls, pieces, specs):
        """Single-constraint pieces; intersections derived from them.

        ``pieces`` maps each :class:`BoundaryOperator` to the function giving
        that constraint on its hyperplane.  The restriction for a set of
        operators applies the remaining operators to the piece of the
        lowest-dimension one.  Pieces must agree on shared intersections;
        see :meth:`check_consistency`.
        """
        n = len(specs)
        out = {}
        for ops in _required_sets(specs):
            first = min(ops)
            if first not in pieces:
                continue
            rest = ops - {first}
            out[ops] = pieces[first] if not rest else apply_boundary_ops(rest, pieces[first])
        return cls(n, out)

    def check_consistency(self, domain, n_points=20, seed=0, tol=1e-6):
        """Finite-difference spot check that nested restrictions agree.

        For every stored set S and every op in S with the rest R also stored,
        compares ``c_S`` against ``op`` applied to ``c_R``.  Returns the worst
        relative discrepancy; raises ValueError above ``tol``.
        """
        rng = np.random.default_rng(seed)
        lo, hi = np.asarray(domain, dtype=float).T
        worst = 0.0
        for S, fS in self.restrictions.items():
            for op in S:
                R = S - {op}
                if R and R not in self.restrictions:
                    continue
                fR = self.restrictions[R] if R else None
                if fR is None:
                    continue
                pts = lo + (hi - lo) * rng.random((n_points, self.n))
                for o in S:
                    pts[:, o.k] = o.p
                want = _fd_boundary(fR, op, pts)
                got = np.broadcast_to(_plain(fS(*pts.T)), (n_points,))
                err = np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want)))
                worst = max(worst, float(err))
                if err > tol:
                    raise ValueError(
                        f"restriction {sorted(S)} disagrees with {op} applied to {sorted(R)}: "
                        f"relative error {err:.3e}"
                    )
        return worst


def _plain(v):
    if isinstance(v, adcore.DiffScalar):
        return v.primal
    return np.asarray(v, dtype=float)


_FD_STEPS = {1: 1e-5, 2: 1e-4}


def _fd_boundary(F, op, pts):
    def at(shift):
        q = pts.copy()
        q[:, op.k] = op.p + shift
        return np.broadcast_to(_plain(F(*q.T)), (len(pts),))

    if op.d == 0:
        return at(0.0)
    h = _FD_STEPS.get(op.d)
    if h is None:
        raise adcore.UnsupportedOrderError(f"no finite-difference check for order {op.d}")
    if op.d == 1:
        return (at(h) - at(-h)) / (2 * h)
    return (at(h) - 2 * at(0.0) + at(-h)) / h**2


# ---------------------------------------------------------------------------
# v vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Monomial:
    power: int

    def __call__(self, x):
        if self.power == 0:
            return 1.0
        if self.power == 1:
            return x
        return x ** self.power

    def derivative_at(self, p, d):
        if d > self.power:
            return 0.0
        return math.perm(self.power, d) * p ** (self.power - d)

    def __str__(self):
        return f"x^{self.power}"


def monomials(count):
    return [Monomial(i) for i in range(count)]


def _basis_derivative(h, p, d):
    if hasattr(h, "derivative_at"):
        return float(h.derivative_at(p, d))
    G = apply_boundary_op(BoundaryOperator(0, p, d), lambda x: h(x))
    return float(np.asarray(_plain(G(0.0))).reshape(()))


@dataclass(frozen=True)
class VVector:
    """Switching functions for one dimension: ``[1, sum_i alpha[i, j] h_i(x)]``."""

    spec: ConstraintSpec
    basis: tuple
    alpha: np.ndarray = field(repr=False)
    B: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.spec) + 1

    def __call__(self, x):
        hs = [h(x) for h in self.basis]
        out = [1.0]
        for j in range(len(self.spec)):
            acc = None
            for i, h in enumerate(hs):
                a = self.alpha[i, j]
                if a == 0.0:
                    continue
                term = h * a if a != 1.0 else h
                acc = term if acc is None else acc + term
            out.append(0.0 if acc is None else acc)
        return out


def build_v(spec: ConstraintSpec, basis: Sequence[Callable] | None = None) -> VVector:
    """Solve ``B alpha = I`` with ``B[m, j] = b_m[h_j]``."""
    ell = len(spec)
    basis = tuple(monomials(ell) if basis is None else basis)
    if len(basis) != ell:
        raise ValueError(f"dimension {spec.k}: need {ell} basis functions, got {len(basis)}")
    B = np.array([[_basis_derivative(h, p, d) for h in basis] for p, d in spec.entries]).reshape(ell, ell)
    if ell:
        cond = np.linalg.cond(B)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllConditionedError(
                f"dimension {spec.k}: constraint matrix is singular or ill-conditioned "
                f"(cond={cond:.3e}); choose a different basis"
            )
        alpha = np.linalg.solve(B, np.eye(ell))
    else:
        alpha = np.zeros((0, 0))
    return VVector(spec, basis, alpha, B)


# ---------------------------------------------------------------------------
# M tensor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MElement:
    index: tuple
    ops: frozenset
    sign: int

    @property
    def order(self):
        return len(self.ops)


def m_sign(m):
    if m == 0:
        return 0
    return 1 if m == 1 else (-1) ** (m + 1)


@dataclass(frozen=True)
class MTensor:
    specs: tuple
    c: ConstraintFunction
    elements: dict = field(repr=False)

    @property
    def shape(self):
        return tuple(len(s) + 1 for s in self.specs)

    def __getitem__(self, index):
        return self.elements[tuple(index)]

    def nonzero(self):
        return [e for e in self.elements.values() if e.ops]

    def value(self, index, xs):
        """Element ``index`` evaluated on c (sign included)."""
        e = self[index]
        if not e.ops:
            return 0.0
        return e.sign * self.c[e.ops](*xs)


def build_m(specs: Sequence[ConstraintSpec], c: ConstraintFunction) -> MTensor:
    specs = tuple(specs)
    for k, s in enumerate(specs):
        if s.k != k:
            raise ValueError(f"spec at position {k} is for dimension {s.k}")
    missing = c.missing(specs)
    if missing:
        raise MissingConstraintError(missing)
    elements = {}
    for index in itertools.product(*(range(len(s) + 1) for s in specs)):
        ops = frozenset(specs[k].ops[i - 1] for k, i in enumerate(index) if i)
        elements[index] = MElement(index, ops, m_sign(len(ops)))
    return MTensor(specs, c, elements)


# ---------------------------------------------------------------------------
# constrained expression
# ---------------------------------------------------------------------------


def _projection_groups(elements):
    """Group operator sets by the hyperplanes they restrict to."""
    groups = {}
    for e in elements:
        key = tuple(sorted((op.k, op.p) for op in e.ops))
        groups.setdefault(key, []).append(e)
    return groups


@dataclass(frozen=True)
class ConstrainedExpression:
    M: MTensor
    v: tuple
    g: Callable | None = None

    @property
    def n(self):
        return len(self.v)

    @property
    def specs(self):
        return self.M.specs

    @property
    def c(self):
        return self.M.c

    def with_free_function(self, g):
        return replace(self, g=g)

    def free_projections(self, xs, g=None):
        """M-tensor entries of g (without sign), keyed by operator set.

        Each distinct set of hyperplanes costs one evaluation of g; all the
        derivative orders needed on it are read from that evaluation.
        """
        g = self.g if g is None else g
        out = {}
        for key, elems in _projection_groups(self.M.nonzero()).items():
            where = {}
            for e in elems:
                for op in e.ops:
                    p, d = where.get(op.k, (op.p, 0))
                    where[op.k] = (p, max(d, op.d))
            with adcore.label(f"g on {key}"):
                raw, slots = _project(g, xs, where)
                for e in elems:
                    out[e.ops] = _extract(raw, slots, {op.k: op.d for op in e.ops})
        return out

    def evaluate(self, xs, g=None):
        """f at ``xs`` (one input per dimension)."""
        g = self.g if g is None else g
        if len(xs) != self.n:
            raise ValueError(f"expression has {self.n} inputs, got {len(xs)}")
        vs = [vk(x) for vk, x in zip(self.v, xs)]
        gp = self.free_projections(xs, g) if g is not None else {}
        f = g(*xs) if g is not None else 0.0
        for e in self.M.nonzero():
            with adcore.label(f"M{e.index}"):
                term = self.c[e.ops](*xs)
                if g is not None:
                    term = term - gp[e.ops]
                w = e.sign
                for k, i in enumerate(e.index):
                    if i:
                        w = vs[k][i] * w
                f = f + term * w
        return f

    def __call__(self, *xs):
        return self.evaluate(xs)


def constrained_expression(specs, c, bases=None, g=None) -> ConstrainedExpression:
    """Build M and v from constraint specs; ``bases[k]`` overrides the monomials."""
    specs = tuple(specs)
    bases = bases or {}
    v = tuple(build_v(s, bases.get(s.k)) for s in specs)
    return ConstrainedExpression(build_m(specs, c), v, g)


# ---------------------------------------------------------------------------
# exactness audit
# ---------------------------------------------------------------------------


@dataclass
class ExactnessReport:
    trials: int
    max_violation: float
    per_constraint: dict
    tol: float = EXACTNESS_TOL

    @property
    def passed(self):
        return self.max_violation <= self.tol


def random_free_function(n, rng, widths=(8, 8)):
    """Small tanh network with Xavier weights and random biases."""
    spec = mlp.NetworkSpec(n, tuple(widths), 1, "tanh")
    theta = mlp.xavier_init(spec, int(rng.integers(2**31))).theta
    layers = mlp.ParameterVector(spec, theta).unflatten()
    for _, b in layers:
        b[:] = rng.normal(0.0, 0.5, size=b.shape)
    net = mlp.bind(spec, theta)
    return lambda *xs: net(xs)


def verify_exactness(expr: ConstrainedExpression, trials=100, seed=0, domain=None,
                     points=16, free_functions=None) -> ExactnessReport:
    """Max |b[f] - b[c]| over random free functions and boundary points."""
    n = expr.n
    lo, hi = (np.zeros(n), np.ones(n)) if domain is None else np.asarray(domain, dtype=float).T
    rng = np.random.default_rng(seed)
    per = {}
    for t in range(trials):
        g = free_functions[t] if free_functions is not None else random_free_function(n, rng)

        def f(*xs, _g=g):
            return expr.evaluate(xs, _g)

        for spec in expr.specs:
            for op in spec.ops:
                pts = lo + (hi - lo) * rng.random((points, n))
                pts[:, op.k] = op.p
                got = _plain(apply_boundary_op(op, f)(*pts.T))
                want = _plain(expr.c[{op}](*pts.T))
                err = float(np.max(np.abs(np.broadcast_to(got - want, (points,)))))
                per[op] = max(per.get(op, 0.0), err)
    worst = max(per.values(), default=0.0)
    return ExactnessReport(trials, worst, per)
