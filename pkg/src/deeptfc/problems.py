"""The four benchmark problems and test-grid error reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import adcore, mlp, tfc, train
from .tfc import BoundaryOperator as Op, ConstraintSpec

PROBLEMS = ("problem1", "problem2", "problem3", "problem4")


def _exp(x):
    return adcore.exp(x) if isinstance(x, adcore.DiffScalar) else np.exp(x)


def _zero(*xs):
    return 0.0


@dataclass(frozen=True)
class ReferenceSolution:
    """``evaluate(points) -> {field: values}``; provenance is a short tag."""

    evaluate: Callable
    provenance: str
    # optional: residual of the PDE system applied to the reference itself
    residual: Callable | None = None
    # dimensions whose constraints the reference satisfies (None: all)
    audit_dims: tuple | None = None


@dataclass(frozen=True)
class ProblemDef:
    name: str
    coords: tuple
    domain: tuple
    fields: dict  # field -> ConstrainedExpression (without free function)
    loss_spec: train.LossSpec
    networks: dict  # field -> NetworkSpec
    config: train.TrainConfig
    reference: ReferenceSolution
    constants: dict = field(default_factory=dict)
    units: str = "m"
    description: str = ""
    # points where the error report is taken; None -> full lattice
    grid_fn: Callable | None = None

    @property
    def n(self):
        return len(self.coords)

    def objective(self, batch):
        return train.ResidualObjective(self.fields, self.loss_spec, batch, self.networks)

    def with_networks(self, networks):
        return replace(self, networks=dict(networks))

    def with_config(self, **kw):
        return replace(self, config=replace(self.config, **kw))


# ---------------------------------------------------------------------------
# problem 1: Poisson-type equation on the unit square
# ---------------------------------------------------------------------------


def problem1_reference(x, y):
    return np.exp(-x) * (x + y**3)


def _p1_forcing(x, y):
    return np.exp(-x) * (x - 2 + y**3 + 6 * y)


def problem1() -> ProblemDef:
    specs = [ConstraintSpec(0, [(0, 0), (1, 0)]), ConstraintSpec(1, [(0, 0), (1, 0)])]
    pieces = {
        Op(0, 0): lambda x, y: y**3,
        Op(0, 1): lambda x, y: (1 + y**3) / math.e,
        Op(1, 0): lambda x, y: x * _exp(-x),
        Op(1, 1): lambda x, y: _exp(-x) * (x + 1),
    }
    c = tfc.ConstraintFunction.from_pieces(pieces, specs)
    quad = [tfc.Monomial(0), tfc.Monomial(2)]
    expr = tfc.constrained_expression(specs, c, bases={0: quad, 1: quad})

    def residual(fields, xs):
        f = fields["z"]
        x, y = (v.primal for v in xs)
        return f.d(0, 2) + f.d(1, 2) - _p1_forcing(x, y)

    def ref_residual(pts):
        x, y = pts.T
        # z_xx + z_yy for z = e^-x (x + y^3)
        lap = np.exp(-x) * (x + y**3 - 2) + np.exp(-x) * 6 * y
        return [lap - _p1_forcing(x, y)]

    return ProblemDef(
        name="problem1",
        coords=("x", "y"),
        domain=((0.0, 1.0), (0.0, 1.0)),
        fields={"z": expr},
        loss_spec=train.LossSpec([residual], {0: 2, 1: 2}, ["laplace"]),
        networks={"z": mlp.NetworkSpec(2, (30,) * 5, 1, "tanh")},
        config=train.TrainConfig(optimizer="bfgs", batch_size=10_000),
        reference=ReferenceSolution(lambda pts: {"z": problem1_reference(*pts.T)}, "closed-form",
                                    ref_residual),
        units="m",
        description="z_xx + z_yy = exp(-x)(x - 2 + y^3 + 6y), Dirichlet on the unit square",
    )


# ---------------------------------------------------------------------------
# problem 2: wave equation
# ---------------------------------------------------------------------------

WAVE_TAIL_TOL = 1e-10


@lru_cache(maxsize=None)
def wave_series_terms(tol=WAVE_TAIL_TOL):
    """Smallest N with 8/pi^3 * sum_{n>N} n^-3 <= tol (integral bound 1/(2N^2))."""
    return int(math.ceil(math.sqrt(8 / math.pi**3 / (2 * tol))))


def wave_series(x, t, c=1.0, tol=WAVE_TAIL_TOL, chunk=2048):
    """sum over odd n of 8/(n pi)^3 sin(n pi x) cos(n pi c t)."""
    x = np.asarray(x, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
    xf, tf = x.ravel(), t.ravel()
    n_max = wave_series_terms(tol)
    out = np.zeros(xf.shape)
    a, b = np.pi * (xf + c * tf), np.pi * (xf - c * tf)
    for start in range(1, n_max + 1, 2 * chunk):
        n = np.arange(start, min(start + 2 * chunk, n_max + 1), 2, dtype=float)
        coef = 8.0 / (n * np.pi) ** 3
        # sin(nx) cos(nct) = (sin(n(x+ct)) + sin(n(x-ct))) / 2
        out += 0.5 * (np.sin(np.outer(a, n)) + np.sin(np.outer(b, n))) @ coef
    return out.reshape(x.shape)


def problem2(c=1.0) -> ProblemDef:
    specs = [ConstraintSpec(0, [(0, 0), (1, 0)]), ConstraintSpec(1, [(0, 0), (0, 1)])]
    pieces = {
        Op(0, 0): _zero,
        Op(0, 1): _zero,
        Op(1, 0, 0): lambda x, t: x * (1 - x),
        Op(1, 0, 1): _zero,
    }
    cf = tfc.ConstraintFunction.from_pieces(pieces, specs)
    expr = tfc.constrained_expression(specs, cf)

    def residual(fields, xs):
        u = fields["u"]
        return u.d(1, 2) - (c * c) * u.d(0, 2)

    def ref_residual(pts):
        # termwise second derivatives of the truncated series
        x, t = pts.T
        n_max = wave_series_terms()
        utt = np.zeros(len(x))
        uxx = np.zeros(len(x))
        for start in range(1, n_max + 1, 4096):
            n = np.arange(start, min(start + 4096, n_max + 1), 2, dtype=float)
            a = 8.0 / (n * np.pi) ** 3
            s = np.sin(np.outer(x, n * np.pi)) * np.cos(np.outer(t, n * np.pi * c))
            utt -= s @ (a * (n * np.pi * c) ** 2)
            uxx -= s @ (a * (n * np.pi) ** 2)
        return [utt - c * c * uxx]

    return ProblemDef(
        name="problem2",
        coords=("x", "t"),
        domain=((0.0, 1.0), (0.0, 1.0)),
        fields={"u": expr},
        loss_spec=train.LossSpec([residual], {0: 2, 1: 2}, ["wave"]),
        networks={"u": mlp.NetworkSpec(2, (30, 30), 1, "tanh")},
        config=train.TrainConfig(optimizer="bfgs", batch_size=10_000),
        reference=ReferenceSolution(lambda pts: {"u": wave_series(pts[:, 0], pts[:, 1], c)},
                                    "series-oracle", ref_residual),
        constants={"c": c},
        units="m",
        description="u_tt = c^2 u_xx, fixed ends, u(x,0) = x(1-x), u_t(x,0) = 0",
    )


# ---------------------------------------------------------------------------
# problems 3 and 4: channel flow
# ---------------------------------------------------------------------------

CHANNEL = {"H": 1.0, "rho": 1.0, "mu": 1.0, "dPdx": -5.0}
CHANNEL_UNITS = {"H": "m", "rho": "kg/m^3", "mu": "Pa*s", "dPdx": "N/m^3"}


def poiseuille(y, H=1.0, mu=1.0, dPdx=-5.0):
    """Steady channel profile u(y) = dP/dx (y^2 - H^2/4) / (2 mu)."""
    return dPdx * (y * y - H * H / 4) / (2 * mu)


def _channel_specs(H):
    return [
        ConstraintSpec(0, [(0, 0)]),
        ConstraintSpec(1, [(-H / 2, 0), (H / 2, 0)]),
        ConstraintSpec(2, [(0, 0)]),
    ]


def _channel_residuals(rho, mu, dPdx):
    def continuity(f, xs):
        return f["u"].d(0) + f["v"].d(1)

    def momentum_x(f, xs):
        u, v = f["u"], f["v"]
        conv = u.d(2) + u * u.d(0) + v * u.d(1)
        return rho * conv + dPdx - mu * (u.d(0, 2) + u.d(1, 2))

    def momentum_y(f, xs):
        u, v = f["u"], f["v"]
        conv = v.d(2) + u * v.d(0) + v * v.d(1)
        return rho * conv - mu * (v.d(0, 2) + v.d(1, 2))

    return [continuity, momentum_x, momentum_y]


def _channel(name, domain, batch_size, steady_start, H=1.0, rho=1.0, mu=1.0, dPdx=-5.0):
    # started from rest, the steady profile only meets the wall constraints
    specs = _channel_specs(H)

    def profile(x, y, t):
        return poiseuille(y, H, mu, dPdx)

    u_in = profile if steady_start else _zero
    u_pieces = {Op(0, 0): u_in, Op(1, -H / 2): _zero, Op(1, H / 2): _zero, Op(2, 0): u_in}
    v_pieces = {op: _zero for op in u_pieces}
    exprs = {
        "u": tfc.constrained_expression(specs, tfc.ConstraintFunction.from_pieces(u_pieces, specs)),
        "v": tfc.constrained_expression(specs, tfc.ConstraintFunction.from_pieces(v_pieces, specs)),
    }
    net = mlp.NetworkSpec(3, (30,) * 4, 1, "sigmoid")
    residuals = _channel_residuals(rho, mu, dPdx)

    def reference(pts):
        y = pts[:, 1]
        return {"u": poiseuille(y, H, mu, dPdx), "v": np.zeros(len(pts))}

    def ref_residual(pts):
        # u = U(y), v = 0: continuity 0; x-momentum dP/dx - mu U''; y-momentum 0
        upp = dPdx / mu
        n = len(pts)
        return [np.zeros(n), np.full(n, dPdx - mu * upp), np.zeros(n)]

    return ProblemDef(
        name=name,
        coords=("x", "y", "t"),
        domain=domain,
        fields=exprs,
        loss_spec=train.LossSpec(residuals, {0: 2, 1: 2, 2: 1},
                                 ["continuity", "momentum_x", "momentum_y"]),
        networks={"u": net, "v": net},
        config=train.TrainConfig(optimizer="bfgs", batch_size=batch_size),
        reference=ReferenceSolution(reference, "steady-state-profile", ref_residual,
                                    None if steady_start else (1,)),
        constants={"H": H, "rho": rho, "mu": mu, "dPdx": dPdx},
        units="m/s",
    )


def problem3() -> ProblemDef:
    p = _channel("problem3", ((0.0, 1.0), (-0.5, 0.5), (0.0, 1.0)), 1_000, True, **CHANNEL)
    return replace(p, description="steady channel flow started from the steady profile")


def outlet_grid(problem, points_per_dim=10):
    """y-line at the outlet x = x_max and final time t = t_max."""
    (x0, x1), (y0, y1), (t0, t1) = problem.domain
    y = np.linspace(y0, y1, points_per_dim)
    return np.column_stack([np.full_like(y, x1), y, np.full_like(y, t1)])


def problem4() -> ProblemDef:
    p = _channel("problem4", ((0.0, 10.0), (-0.5, 0.5), (0.0, 3.0)), 2_000, False, **CHANNEL)
    return replace(p, grid_fn=outlet_grid,
                   description="channel flow started from rest; outlet profile at the final time "
                               "compared with the steady profile")


_BUILDERS = {"problem1": problem1, "problem2": problem2, "problem3": problem3, "problem4": problem4}


def get(name) -> ProblemDef:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {', '.join(PROBLEMS)}") from None


# ---------------------------------------------------------------------------
# test grids and error reports
# ---------------------------------------------------------------------------


def test_grid(problem: ProblemDef, points_per_dim=10):
    """Uniform lattice with endpoints, ``points_per_dim ** n`` points (first axis slowest)."""
    if points_per_dim < 2:
        raise ValueError("points_per_dim must be >= 2")
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in problem.domain]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def evaluation_grid(problem: ProblemDef, points_per_dim=10):
    fn = problem.grid_fn or test_grid
    return fn(problem, points_per_dim)


def predict(problem: ProblemDef, params: dict, points):
    """Field values of the trained constrained expressions at ``points``."""
    points = np.asarray(points, dtype=float)
    xs = [points[:, k] for k in range(problem.n)]
    out = {}
    for name, expr in problem.fields.items():
        p = params[name]
        net = mlp.bind(p.spec, p)
        v = expr.evaluate(xs, lambda *a, _net=net: _net(a))
        v = v.primal if isinstance(v, adcore.DiffScalar) else np.asarray(v, dtype=float)
        out[name] = np.broadcast_to(v, (len(points),)).copy()
    return out


@dataclass
class ErrorReport:
    problem: str
    coords: tuple
    points: np.ndarray = field(repr=False)
    errors: dict = field(repr=False)  # field -> |error| per point
    units: str = "m"

    @property
    def max_abs_error(self):
        return {k: float(np.max(e)) for k, e in self.errors.items()}

    @property
    def mean_abs_error(self):
        return {k: float(np.mean(e)) for k, e in self.errors.items()}

    @property
    def grid_shape(self):
        return (len(self.points),)

    def summary(self):
        return {
            "problem": self.problem,
            "units": self.units,
            "points": len(self.points),
            "max_abs_error": self.max_abs_error,
            "mean_abs_error": self.mean_abs_error,
        }

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            names = list(self.errors)
            w.writerow(list(self.coords) + [f"abs_error_{n}" for n in names])
            for i, pt in enumerate(self.points):
                w.writerow([repr(float(v)) for v in pt] + [repr(float(self.errors[n][i])) for n in names])
        return path


def error_report(problem: ProblemDef, params: dict, grid=None) -> ErrorReport:
    grid = evaluation_grid(problem) if grid is None else np.asarray(grid, dtype=float)
    got = predict(problem, params, grid)
    want = problem.reference.evaluate(grid)
    errors = {k: np.abs(got[k] - want[k]) for k in problem.fields}
    return ErrorReport(problem.name, problem.coords, grid, errors, problem.units)


def symmetry_report(problem: ProblemDef, params: dict, points_per_dim=10, field_name="u"):
    """max |u(x, y, t) - u(x, -y, t)| over mirrored lattice points."""
    grid = test_grid(problem, points_per_dim)
    mirrored = grid.copy()
    mirrored[:, 1] = -mirrored[:, 1]
    a = predict(problem, params, grid)[field_name]
    b = predict(problem, params, mirrored)[field_name]
    return float(np.max(np.abs(a - b)))


def zero_params(problem: ProblemDef):
    return {k: mlp.ParameterVector(s, np.zeros(s.n_params)) for k, s in problem.networks.items()}


def init_params(problem: ProblemDef, seed: int):
    """Xavier init; field i uses seed ``seed + i``."""
    return {k: mlp.xavier_init(s, seed + i) for i, (k, s) in enumerate(problem.networks.items())}


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------


@dataclass
class AuditCheck:
    name: str
    value: float
    tol: float

    @property
    def passed(self):
        return bool(self.value <= self.tol)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


def _fd_reference(fn, op, pts, h=1e-5):
    def at(shift):
        q = pts.copy()
        q[:, op.k] = op.p + shift
        return fn(q)

    if op.d == 0:
        return at(0.0)
    if op.d == 1:
        return (at(h) - at(-h)) / (2 * h)
    return (at(h) - 2 * at(0.0) + at(-h)) / h**2


def reference_boundary_violation(problem: ProblemDef, n_points=100, seed=0):
    """max |b[ref] - b[c]| at random boundary points (finite differences for d > 0)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(problem.domain).T
    dims = problem.reference.audit_dims
    worst = 0.0
    for name, expr in problem.fields.items():
        fn = lambda q, _n=name: problem.reference.evaluate(q)[_n]
        for spec in expr.specs:
            if dims is not None and spec.k not in dims:
                continue
            for op in spec.ops:
                pts = lo + (hi - lo) * rng.random((n_points, problem.n))
                pts[:, op.k] = op.p
                want = np.broadcast_to(tfc._plain(expr.c[{op}](*pts.T)), (n_points,))
                worst = max(worst, float(np.max(np.abs(_fd_reference(fn, op, pts) - want))))
    return worst


def reference_residual(problem: ProblemDef, n_points=100, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(problem.domain).T
    pts = lo + (hi - lo) * rng.random((n_points, problem.n))
    return max(float(np.max(np.abs(r))) for r in problem.reference.residual(pts))


def v_vector_violation(problem: ProblemDef):
    """max |B alpha - I| and max |b_m[v_j] - delta_mj| over every dimension."""
    worst = 0.0
    for expr in problem.fields.values():
        for vk in expr.v:
            ell = len(vk.spec)
            if not ell:
                continue
            worst = max(worst, float(np.max(np.abs(vk.B @ vk.alpha - np.eye(ell)))))
            for m, op in enumerate(vk.spec.ops):
                for j in range(1, ell + 1):
                    fn = lambda *xs, _j=j, _k=op.k: vk(xs[_k])[_j]
                    got = tfc._plain(tfc.apply_boundary_op(op, fn)(*([0.0] * problem.n)))
                    worst = max(worst, abs(float(got) - (1.0 if m == j - 1 else 0.0)))
    return worst


def audits(problem: ProblemDef, trials=100, seed=0):
    checks = []
    worst = 0.0
    for name, expr in problem.fields.items():
        rep = tfc.verify_exactness(expr, trials, seed, problem.domain)
        worst = max(worst, rep.max_violation)
    checks.append(AuditCheck(f"boundary exactness ({trials} free functions)", worst, tfc.EXACTNESS_TOL))
    checks.append(AuditCheck("v-vector delta property", v_vector_violation(problem), 1e-10))
    cons = max(expr.c.check_consistency(problem.domain, seed=seed) for expr in problem.fields.values())
    checks.append(AuditCheck("constraint restrictions consistent", cons, 1e-6))
    dims = problem.reference.audit_dims
    label = "reference meets constraints" + ("" if dims is None else f" (dims {list(dims)})")
    checks.append(AuditCheck(label, reference_boundary_violation(problem, seed=seed), 1e-10))
    checks.append(AuditCheck("reference residual", reference_residual(problem, seed=seed), 1e-8))
    if problem.name == "problem3":
        rep = error_report(problem, zero_params(problem), test_grid(problem))
        checks.append(AuditCheck("zero network reproduces steady profile",
                                 max(rep.max_abs_error.values()), 1e-12))
    return checks


def fit(problem: ProblemDef, config: train.TrainConfig | None = None, diagnostics=None):
    """Train the problem's networks; returns (params, result, objective).

    The batch and the initial weights are both derived from ``config.seed``.
    """
    tc = config or problem.config
    batch = train.sample_uniform(problem.domain, tc.batch_size, tc.seed)
    objective = problem.objective(batch)
    theta0 = objective.join(init_params(problem, tc.seed))
    resample = None
    if tc.resample and tc.optimizer == "adam":
        def resample(step):
            return problem.objective(train.sample_uniform(problem.domain, tc.batch_size, [tc.seed, step]))
    result = train.train(objective, theta0, tc, diagnostics, resample)
    return objective.split(result.theta), result, objective
