"""Residual loss assembly and the optimizers that minimize it.

The loss is the plain sum of squared residuals over a fixed batch of
interior points (one batch per run).  Optimizers work on a flat float64
parameter vector through an objective ``fun(theta) -> (loss, grad)``.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import blas

from . import adcore, mlp


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# sampling and loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleBatch:
    points: np.ndarray
    domain: tuple
    seed: int

    def __len__(self):
        return len(self.points)

    @property
    def columns(self):
        return [self.points[:, k] for k in range(self.points.shape[1])]


def sample_uniform(domain, n_points: int, seed) -> SampleBatch:
    """IID uniform points in a box; ``seed`` is an int or a sequence of ints."""
    box = np.asarray(domain, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError(f"domain must be a list of [lo, hi] pairs, got {domain!r}")
    if not np.all(box[:, 0] < box[:, 1]):
        raise ValueError(f"degenerate domain box {box.tolist()}")
    if n_points < 1:
        raise ValueError(f"need at least one sample, got {n_points}")
    # separate stream from weight init, which uses default_rng(seed) directly
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    u = rng.random((n_points, len(box)))
    pts = box[:, 0] + u * (box[:, 1] - box[:, 0])
    return SampleBatch(pts, tuple(map(tuple, box.tolist())), seed)


@dataclass
class LossSpec:
    """Residual operators and the input derivative orders they need.

    Each residual is called as ``r(fields, xs)`` where ``fields`` maps a field
    name to its constrained-expression value and ``xs`` are the seeded inputs.
    """

    residuals: Sequence[Callable]
    orders: dict
    names: Sequence[str] = ()


def _field_fn(spec, leaf):
    net = mlp.bind(spec, leaf)
    return lambda *xs: net(xs)


def evaluate_fields(exprs, net_specs, thetas, xs):
    """Constrained expressions of every field with their networks plugged in."""
    return {name: expr.evaluate(xs, _field_fn(net_specs[name], thetas[name]))
            for name, expr in exprs.items()}


def residual_values(exprs, spec: LossSpec, points, net_specs, thetas):
    """Plain residual arrays (one per operator) at ``points``."""
    xs = adcore.seed(points, spec.orders)
    fields = evaluate_fields(exprs, net_specs, thetas, xs)
    out = []
    for r in spec.residuals:
        v = r(fields, xs)
        out.append(v.primal if isinstance(v, adcore.DiffScalar) else np.asarray(v, dtype=float))
    return out


def loss(exprs, spec: LossSpec, batch: SampleBatch, params):
    """Sum over samples and residual operators of squared residuals.

    ``params`` maps field name to a :class:`mlp.ParameterVector` or to a
    parameter leaf from :func:`adcore.parameter`.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    net_specs, thetas = {}, {}
    for name, p in params.items():
        if isinstance(p, mlp.ParameterVector):
            net_specs[name], thetas[name] = p.spec, p.theta
        else:
            net_specs[name], thetas[name] = p
    try:
        xs = adcore.seed(batch.points, spec.orders)
        fields = evaluate_fields(exprs, net_specs, thetas, xs)
        total = None
        for i, r in enumerate(spec.residuals):
            name = spec.names[i] if i < len(spec.names) else f"r{i}"
            with adcore.label(f"residual {name}"):
                v = r(fields, xs)
                sq = (v * v).sum()
            total = sq if total is None else total + sq
    except adcore.NonFiniteError as e:
        if e.index:
            i = e.index[0]
            raise adcore.NonFiniteError(
                e.op, f"{e.context}; sample {i} at {batch.points[i].tolist()}", e.index
            ) from e
        raise
    return total


class ResidualObjective:
    """``theta -> (loss, grad)`` for networks plugged into constrained expressions.

    The flat vector concatenates each field's parameters in ``net_specs``
    order.
    """

    def __init__(self, exprs, spec: LossSpec, batch: SampleBatch, net_specs: dict):
        self.exprs = exprs
        self.spec = spec
        self.batch = batch
        self.net_specs = dict(net_specs)
        self.names = list(self.net_specs)
        sizes = [s.n_params for s in self.net_specs.values()]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.n_evals = 0

    @property
    def n_params(self):
        return int(self.offsets[-1])

    def split(self, theta):
        return {n: mlp.ParameterVector(self.net_specs[n], theta[self.offsets[i]:self.offsets[i + 1]])
                for i, n in enumerate(self.names)}

    def join(self, params):
        return np.concatenate([params[n].theta for n in self.names])

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        self.n_evals += 1
        leaves = [adcore.parameter(theta[self.offsets[i]:self.offsets[i + 1]])
                  for i in range(len(self.names))]
        params = {n: (self.net_specs[n], leaf) for n, leaf in zip(self.names, leaves)}
        L = loss(self.exprs, self.spec, self.batch, params)
        return float(L.primal), adcore.param_gradient(L, leaves)


# ---------------------------------------------------------------------------
# configuration and diagnostics
# ---------------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "bfgs"
    batch_size: int = 10_000
    max_iterations: int = 20_000
    gtol: float = 1e-9
    adam: AdamConfig = field(default_factory=AdamConfig)
    adam_iterations: int = 0  # Adam budget inside "hybrid"
    resample: bool = False  # Adam only: fresh batch every step
    c1: float = 1e-4
    c2: float = 0.9
    lbfgs: bool = False
    memory: int = 20
    time_limit_s: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        if self.optimizer not in ("adam", "bfgs", "hybrid"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_iterations < 0 or self.adam_iterations < 0:
            raise ValueError("batch size must be positive and iteration budgets non-negative")
        if not (self.gtol > 0 and self.adam.lr > 0 and self.adam.eps > 0):
            raise ValueError("tolerances and step sizes must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search needs 0 < c1 < c2 < 1")

    def to_dict(self):
        return asdict(self)


class Diagnostics:
    """Per-iteration records, optionally streamed as JSON lines."""

    def __init__(self, sinks=(), t0=None):
        self.records = []
        self.sinks = list(sinks)
        self.t0 = time.perf_counter() if t0 is None else t0

    def log(self, iteration, loss_value, grad_norm, **extra):
        rec = {"iteration": int(iteration), "loss": float(loss_value),
               "grad_norm": float(grad_norm), "wall_time_s": time.perf_counter() - self.t0}
        rec.update(extra)
        self.records.append(rec)
        line = json.dumps(rec)
        for s in self.sinks:
            s.write(line + "\n")
            s.flush()
        return rec

    def elapsed(self):
        return time.perf_counter() - self.t0


def stderr_diagnostics():
    return Diagnostics([sys.stderr])


@dataclass
class Result:
    theta: np.ndarray
    loss: float
    grad_norm: float
    iterations: int
    stop_reason: str
    diagnostics: Diagnostics
    phases: list = field(default_factory=list)


def _inf_norm(g):
    return float(np.max(np.abs(g))) if g.size else 0.0


def _safe_eval(fun, x):
    try:
        f, g = fun(x)
    except adcore.NonFiniteError:
        return math.inf, None
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        return math.inf, None
    return f, g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params, grad, config: AdamConfig):
    """One bias-corrected Adam update; returns the new state and parameters."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient in Adam step")
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grad
    v = config.beta2 * state.v + (1 - config.beta2) * grad * grad
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    new = params - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return AdamState(m, v, t), new


def adam_minimize(fun, theta0, config: TrainConfig, diagnostics=None, iterations=None,
                  resample: Callable | None = None) -> Result:
    """Adam for a fixed number of steps; ``resample(step)`` may swap the objective."""
    diag = diagnostics or Diagnostics()
    n_steps = config.max_iterations if iterations is None else iterations
    theta = np.array(theta0, dtype=float)
    state = AdamState.zeros(theta.size)
    f, g = fun(theta)
    if not math.isfinite(f):
        raise TrainingError("non-finite loss at the initial parameters")
    diag.log(0, f, _inf_norm(g), phase="adam")
    reason = "max_iterations"
    for it in range(1, n_steps + 1):
        state, theta = adam_step(state, theta, g, config.adam)
        if resample is not None:
            fun = resample(it)
        f, g = fun(theta)
        if not math.isfinite(f):
            raise TrainingError(f"loss became non-finite at Adam step {it}")
        diag.log(it, f, _inf_norm(g), phase="adam")
        if config.time_limit_s is not None and diag.elapsed() > config.time_limit_s:
            reason = "time_limit"
            break
    else:
        it = n_steps
    return Result(theta, f, _inf_norm(g), it, reason, diag)


# ---------------------------------------------------------------------------
# line search
# ---------------------------------------------------------------------------


# relative size of objective changes treated as evaluation noise
ROUNDOFF = 1e-12


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic through two points with slopes, or None."""
    d1 = da + db - 3 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


@dataclass
class LineSearchResult:
    ok: bool
    alpha: float
    f: float
    g: np.ndarray | None
    evals: int


def strong_wolfe(fun, x, p, f0, g0, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=30,
                 alpha_max=1e10) -> LineSearchResult:
    """Bracketing + zoom search for a step meeting the strong Wolfe conditions.

    Non-finite objective values count as +inf (forces backtracking).  Once
    objective differences drop to roundoff, a step is also accepted on the
    slope alone (approximate Wolfe conditions).
    """
    d0 = float(g0 @ p)
    if not d0 < 0:
        return LineSearchResult(False, 0.0, f0, g0, 0)
    evals = 0
    f_noise = ROUNDOFF * abs(f0)

    def approx_wolfe(f, d):
        return f <= f0 + f_noise and c2 * d0 <= d <= (2 * c1 - 1) * d0

    def phi(a):
        nonlocal evals
        evals += 1
        f, g = _safe_eval(fun, x + a * p)
        d = float(g @ p) if g is not None else math.nan
        return f, g, d

    def zoom(lo, f_lo, d_lo, g_lo, hi, f_hi, d_hi):
        while evals < max_evals:
            width = hi - lo
            a = None
            if math.isfinite(f_hi) and math.isfinite(d_hi):
                a = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
            lo_b, hi_b = sorted((lo + 0.1 * width, hi - 0.1 * width))
            if a is None or not lo_b <= a <= hi_b:
                a = lo + 0.5 * width
            f, g, d = phi(a)
            if approx_wolfe(f, d):
                return LineSearchResult(True, a, f, g, evals)
            if f > f0 + c1 * a * d0 or f >= f_lo:
                hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return LineSearchResult(True, a, f, g, evals)
                if d * (hi - lo) >= 0:
                    hi, f_hi, d_hi = lo, f_lo, d_lo
                lo, f_lo, d_lo, g_lo = a, f, d, g
            if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
                break
        # no strong-Wolfe point found; a sufficient-decrease step is still usable
        if lo > 0:
            return LineSearchResult(False, lo, f_lo, g_lo, evals)
        return LineSearchResult(False, 0.0, f0, g0, evals)

    a_prev, f_prev, d_prev, g_prev = 0.0, f0, d0, g0
    a = alpha0
    first = True
    while evals < max_evals:
        f, g, d = phi(a)
        if approx_wolfe(f, d):
            return LineSearchResult(True, a, f, g, evals)
        if f > f0 + c1 * a * d0 or (not first and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, g_prev, a, f, d)
        if abs(d) <= -c2 * d0:
            return LineSearchResult(True, a, f, g, evals)
        if d >= 0:
            return zoom(a, f, d, g, a_prev, f_prev, d_prev)
        a_prev, f_prev, d_prev, g_prev = a, f, d, g
        a = min(2.0 * a, alpha_max)
        first = False
    return LineSearchResult(False, a_prev, f_prev, g_prev, evals) if a_prev > 0 else \
        LineSearchResult(False, 0.0, f0, g0, evals)


# ---------------------------------------------------------------------------
# BFGS
# ---------------------------------------------------------------------------


class _DenseInverseHessian:
    """Symmetric inverse-Hessian approximation; only the upper triangle is kept."""

    def __init__(self, n):
        self.H = np.asfortranarray(np.eye(n))
        self.fresh = True

    def reset(self, scale=1.0):
        self.H[:] = 0.0
        np.fill_diagonal(self.H, scale)
        self.fresh = True

    def apply(self, g):
        return blas.dsymv(1.0, self.H, g)

    def update(self, s, y):
        sy = float(s @ y)
        if self.fresh:
            # first update: rescale the identity to the observed curvature
            self.reset(sy / float(y @ y))
            self.fresh = False
        rho = 1.0 / sy
        Hy = self.apply(y)
        yHy = float(y @ Hy)
        beta = rho * rho * yHy + rho
        w = -rho * Hy + 0.5 * beta * s
        # H += s w^T + w s^T  ==  H - rho (s Hy^T + Hy s^T) + beta s s^T
        self.H = blas.dsyr2(1.0, s, w, a=self.H, overwrite_a=1)


class _LimitedInverseHessian:
    def __init__(self, n, memory):
        self.memory = memory
        self.pairs = []
        self.gamma = 1.0
        self.fresh = True

    def reset(self, scale=1.0):
        self.pairs.clear()
        self.gamma = scale
        self.fresh = True

    def apply(self, g):
        q = g.copy()
        coef = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            coef.append(a)
            q -= a * y
        r = self.gamma * q
        for (s, y, rho), a in zip(self.pairs, reversed(coef)):
            b = rho * float(y @ r)
            r += (a - b) * s
        return r

    def update(self, s, y):
        sy = float(s @ y)
        self.gamma = sy / float(y @ y)
        self.fresh = False
        self.pairs.append((s, y, 1.0 / sy))
        if len(self.pairs) > self.memory:
            self.pairs.pop(0)


def bfgs_minimize(fun, theta0, config: TrainConfig | None = None, diagnostics=None,
                  max_iterations=None) -> Result:
    """Quasi-Newton minimization with strong-Wolfe line searches.

    Stops when the gradient infinity norm reaches ``config.gtol``, after
    ``max_iterations`` updates, or when the line search cannot make progress
    even from a reset Hessian approximation.
    """
    config = config or TrainConfig()
    diag = diagnostics or Diagnostics()
    n_iter = config.max_iterations if max_iterations is None else max_iterations
    x = np.array(theta0, dtype=float)
    f, g = fun(x)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise TrainingError("non-finite loss or gradient at the initial parameters")
    gn = _inf_norm(g)
    diag.log(0, f, gn, phase="bfgs")
    H = _LimitedInverseHessian(x.size, config.memory) if config.lbfgs else _DenseInverseHessian(x.size)
    it = 0
    reason = "gtol" if gn <= config.gtol else "max_iterations"
    while reason == "max_iterations" and it < n_iter:
        if config.time_limit_s is not None and diag.elapsed() > config.time_limit_s:
            reason = "time_limit"
            break
        p = -H.apply(g)
        if not float(p @ g) < 0:
            H.reset()
            p = -g
        alpha0 = min(1.0, 1.0 / max(gn, 1e-300)) if H.fresh else 1.0
        ls = strong_wolfe(fun, x, p, f, g, alpha0, config.c1, config.c2)
        if ls.alpha == 0.0:
            if H.fresh:
                reason = "line_search"
                break
            H.reset()
            continue
        s = ls.alpha * p
        x_new = x + s
        y = ls.g - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            H.update(s, y)
        x, f, g = x_new, ls.f, ls.g
        gn = _inf_norm(g)
        it += 1
        diag.log(it, f, gn, phase="bfgs", step=ls.alpha, evals=ls.evals)
        if gn <= config.gtol:
            reason = "gtol"
    return Result(x, f, gn, it, reason, diag)


def hybrid_train(fun, theta0, config: TrainConfig, diagnostics=None) -> Result:
    """Adam for ``config.adam_iterations`` steps, then BFGS from the result."""
    diag = diagnostics or Diagnostics()
    phases = []
    theta = np.array(theta0, dtype=float)
    if config.adam_iterations > 0:
        ra = adam_minimize(fun, theta, config, diag, iterations=config.adam_iterations)
        phases.append(("adam", ra.iterations, ra.stop_reason))
        theta = ra.theta
    rb = bfgs_minimize(fun, theta, config, diag)
    phases.append(("bfgs", rb.iterations, rb.stop_reason))
    return Result(rb.theta, rb.loss, rb.grad_norm, sum(p[1] for p in phases), rb.stop_reason,
                  diag, phases)


def train(fun, theta0, config: TrainConfig, diagnostics=None, resample=None) -> Result:
    if config.optimizer == "adam":
        return adam_minimize(fun, theta0, config, diagnostics, resample=resample)
    if config.optimizer == "bfgs":
        return bfgs_minimize(fun, theta0, config, diagnostics)
    return hybrid_train(fun, theta0, config, diagnostics)
