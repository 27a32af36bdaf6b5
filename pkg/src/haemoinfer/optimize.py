"""Box-constrained nonlinear least squares by SQP with Sobol multistart.

All iterations run in scaled coordinates ``x = theta / s``. Derivatives come
from central finite differences, the Lagrangian Hessian from damped BFGS
updates, and each search direction from a small active-set QP over the box
(plus any linearised equality constraints). A merit line search treats the
RSS sentinel as an infeasible value and backtracks away from it.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .errors import ValidationError
from .stats import SENTINEL


class OptimizationFailed(RuntimeError):
    """Every start of a multistart run failed."""


@dataclass
class OptProblem:
    """Minimise ``objective(theta)`` subject to ``lower <= theta <= upper``.

    ``equality`` (optional) maps theta to a vector that must vanish.
    """

    objective: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    scale: np.ndarray | None = None
    equality: Callable[[np.ndarray], np.ndarray] | None = None
    names: tuple | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValidationError("bounds must be 1D arrays of equal length")
        if np.any(self.lower >= self.upper):
            raise ValidationError("every lower bound must be below its upper bound")
        self.scale = np.ones_like(self.lower) if self.scale is None else np.asarray(self.scale, dtype=float)
        if self.scale.shape != self.lower.shape or np.any(self.scale <= 0):
            raise ValidationError("scale must be positive with one entry per parameter")

    @property
    def dim(self) -> int:
        return self.lower.size


@dataclass(frozen=True)
class OptConfig:
    xtol: float = 1e-11
    max_iter: int = 500
    fd_step: float = 1e-4
    hess_step: float = 1e-3
    gtol: float = 1e-4  # projected-gradient bound for accepting a stalled line search
    ftol: float = 1e-10  # relative decrease of the last step below which a stalled search counts as converged
    armijo: float = 1e-4
    max_backtracks: int = 40
    max_resets: int = 5  # quasi-Newton restarts allowed before giving up
    init_step: float = 0.1  # first trial step, as a fraction of the narrowest scaled box width


@dataclass
class OptResult:
    theta: np.ndarray
    S: float
    hessian: np.ndarray | None
    iterations: int
    converged: bool
    start_index: int = 0
    start: np.ndarray | None = None
    n_evals: int = 0
    grad_norm: float = math.nan
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "start_index": self.start_index,
            "start": None if self.start is None else self.start.tolist(),
            "theta": self.theta.tolist(),
            "S": self.S,
            "iterations": self.iterations,
            "converged": self.converged,
            "n_evals": self.n_evals,
            "grad_norm": self.grad_norm,
            "message": self.message,
            "hessian": None if self.hessian is None else self.hessian.tolist(),
        }


class _Scaled:
    """Objective and constraints in scaled coordinates, with an eval counter."""

    def __init__(self, problem: OptProblem):
        self.p = problem
        self.lo = problem.lower / problem.scale
        self.hi = problem.upper / problem.scale
        self.n_evals = 0

    def theta(self, x):
        return np.clip(x, self.lo, self.hi) * self.p.scale

    def f(self, x) -> float:
        self.n_evals += 1
        try:
            v = float(self.p.objective(self.theta(x)))
        except Exception:  # a failing model is just an invalid region
            return SENTINEL
        return v if math.isfinite(v) and v < SENTINEL else SENTINEL

    def c(self, x):
        if self.p.equality is None:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self.p.equality(self.theta(x)), dtype=float))

    def _steps(self, x, rel):
        return rel * np.maximum(1.0, np.abs(x))

    def grad(self, x, fx, rel):
        """Central differences, one-sided at bounds or next to the sentinel."""
        d = x.size
        g = np.empty(d)
        h = self._steps(x, rel)
        for j in range(d):
            up = x[j] + h[j] <= self.hi[j]
            dn = x[j] - h[j] >= self.lo[j]
            fp = fm = None
            if up:
                e = x.copy()
                e[j] += h[j]
                fp = self.f(e)
                if fp >= SENTINEL:
                    fp = None
            if dn:
                e = x.copy()
                e[j] -= h[j]
                fm = self.f(e)
                if fm >= SENTINEL:
                    fm = None
            if fp is not None and fm is not None:
                g[j] = (fp - fm) / (2 * h[j])
            elif fp is not None:
                g[j] = (fp - fx) / h[j]
            elif fm is not None:
                g[j] = (fx - fm) / h[j]
            else:
                g[j] = math.nan
        return g

    def jac_c(self, x, cx, rel):
        if cx.size == 0:
            return np.zeros((0, x.size))
        h = self._steps(x, rel)
        J = np.empty((cx.size, x.size))
        for j in range(x.size):
            e = x.copy()
            e[j] += h[j]
            em = x.copy()
            em[j] -= h[j]
            J[:, j] = (self.c(e) - self.c(em)) / (2 * h[j])
        return J


def fd_hessian(func, x, lo, hi, rel=1e-3):
    """Symmetric finite-difference Hessian; stencils shifted inside the box."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = rel * np.maximum(1.0, np.abs(x))
    # centre the stencil so that x +/- h stays feasible
    c = np.clip(x, lo + h, hi - h)
    f0 = func(c)
    fp = np.empty(d)
    fm = np.empty(d)
    for i in range(d):
        e = c.copy()
        e[i] += h[i]
        fp[i] = func(e)
        e[i] = c[i] - h[i]
        fm[i] = func(e)
    H = np.empty((d, d))
    for i in range(d):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h[i] ** 2
        for j in range(i + 1, d):
            e = c.copy()
            e[i] += h[i]
            e[j] += h[j]
            fpp = func(e)
            e[j] = c[j] - h[j]
            fpm = func(e)
            e[i] = c[i] - h[i]
            fmm = func(e)
            e[j] = c[j] + h[j]
            fmp = func(e)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
    return H


def solve_qp(B, g, lo, hi, A=None, b=None, max_iter=200):
    """Primal active-set solve of ``min g.v + v.B.v/2`` with ``lo <= v <= hi``, ``A v = b``.

    ``B`` must be symmetric positive definite. Returns ``(v, lam)`` where
    ``lam`` are the equality multipliers (sign convention ``g + B v = A^T lam``
    on the free variables).
    """
    d = g.size
    if A is None:
        A = np.zeros((0, d))
        b = np.zeros(0)
    m = A.shape[0]
    # feasible start: least-norm equality solution, pushing violated entries onto bounds
    fixed = np.zeros(d, dtype=bool)
    v = np.clip(np.zeros(d), lo, hi)
    for _ in range(d + 1):
        if m == 0:
            break
        free = ~fixed
        rhs = b - A[:, fixed] @ v[fixed]
        v[free] = np.linalg.lstsq(A[:, free], rhs, rcond=None)[0]
        viol = (v < lo - 1e-14) | (v > hi + 1e-14)
        if not viol.any():
            break
        v = np.clip(v, lo, hi)
        fixed |= viol
    v = np.clip(v, lo, hi)
    W = np.zeros(d, dtype=int)  # 0 free, -1 at lower, +1 at upper
    W[(v <= lo) & fixed] = -1
    W[(v >= hi) & fixed] = 1
    lam = np.zeros(m)
    for _ in range(max_iter):
        F = W == 0
        nf = int(F.sum())
        vw = v.copy()
        vw[~F] = np.where(W[~F] < 0, lo[~F], hi[~F])
        grad_fixed = g[F] + B[np.ix_(F, ~F)] @ vw[~F]
        K = np.zeros((nf + m, nf + m))
        K[:nf, :nf] = B[np.ix_(F, F)]
        K[:nf, nf:] = -A[:, F].T
        K[nf:, :nf] = A[:, F]
        rhs = np.concatenate([-grad_fixed, b - A[:, ~F] @ vw[~F]])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0] if nf + m else np.zeros(0)
        target = vw.copy()
        target[F] = sol[:nf]
        lam = sol[nf:]
        p = target - v
        if np.max(np.abs(p), initial=0.0) <= 1e-15 * (1 + np.max(np.abs(v), initial=0.0)):
            r = g + B @ target - A.T @ lam
            # bound multipliers: at lower need r >= 0, at upper r <= 0
            worst, idx = 0.0, -1
            for i in np.flatnonzero(~F):
                viol = -r[i] if W[i] < 0 else r[i]
                if viol > worst:
                    worst, idx = viol, i
            if idx < 0 or worst <= 1e-12 * (1 + np.abs(r).max()):
                return target, lam
            W[idx] = 0
            v = target
            continue
        alpha, block = 1.0, -1
        for i in np.flatnonzero(F):
            if p[i] < 0 and v[i] + p[i] < lo[i]:
                a = (lo[i] - v[i]) / p[i]
                if a < alpha:
                    alpha, block = a, i
            elif p[i] > 0 and v[i] + p[i] > hi[i]:
                a = (hi[i] - v[i]) / p[i]
                if a < alpha:
                    alpha, block = a, i
        v = v + alpha * p
        if block >= 0:
            W[block] = -1 if p[block] < 0 else 1
            v[block] = lo[block] if p[block] < 0 else hi[block]
    return np.clip(v, lo, hi), lam


def _projected_gradient(x, g, lo, hi, Jc=None):
    pg = g.copy()
    if Jc is not None and Jc.size:
        lam = np.linalg.lstsq(Jc.T, g, rcond=None)[0]
        pg = g - Jc.T @ lam
    at_lo = (x <= lo) & (g > 0)
    at_hi = (x >= hi) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def sqp_minimize(problem: OptProblem, start, config: OptConfig = OptConfig(),
                 start_index: int = 0, with_hessian: bool = True) -> OptResult:
    """Minimise from one start; every iterate stays inside the box.

    Parameters
    ----------
    problem : OptProblem
        Objective, bounds and scaling.
    start : array_like
        Starting theta (unscaled), must lie inside the bounds.
    config : OptConfig
        Tolerances: the run stops when the accepted step satisfies
        ``max |x_i - x_{i+1}| < xtol`` in scaled coordinates. A line search
        that fails right after a step which lowered the objective by less
        than ``ftol * max(1, |S|)`` also counts as converged, since the
        finite-difference gradient is then dominated by solver noise.
    with_hessian : bool
        Also return the finite-difference Hessian of the objective at the
        optimum, in scaled coordinates.
    """
    start = np.asarray(start, dtype=float)
    if start.shape != problem.lower.shape:
        raise ValidationError("start has the wrong dimension")
    if np.any(start < problem.lower) or np.any(start > problem.upper):
        raise ValidationError("start lies outside the bounds")
    sc = _Scaled(problem)
    lo, hi = sc.lo, sc.hi
    x = np.clip(start / problem.scale, lo, hi)
    fx = sc.f(x)
    if fx >= SENTINEL:
        return OptResult(theta=sc.theta(x), S=fx, hessian=None, iterations=0, converged=False,
                         start_index=start_index, start=start, n_evals=sc.n_evals,
                         message="objective invalid at start")
    d = x.size
    width = float(np.min(hi - lo))

    def fresh_b(grad):
        # scaled identity whose Newton step is at most init_step of the box
        return np.eye(d) * max(1.0, np.max(np.abs(grad)) / (config.init_step * width))

    cx = sc.c(x)
    g = sc.grad(x, fx, config.fd_step)
    Jc = sc.jac_c(x, cx, config.fd_step)
    lam = np.zeros(cx.size)
    B = fresh_b(g) if np.all(np.isfinite(g)) else np.eye(d)
    rho = 1.0
    converged, message = False, "iteration limit reached"
    it = 0
    first = True
    resets = 0
    last_drop = math.inf
    for it in range(1, config.max_iter + 1):
        if not np.all(np.isfinite(g)):
            message = "objective invalid in every direction around the iterate"
            break
        p, lam_new = solve_qp(B, g, lo - x, hi - x, Jc if cx.size else None, -cx if cx.size else None)
        if np.max(np.abs(p)) < config.xtol:
            converged, message = True, "step below xtol"
            break
        rho = max(rho, 2 * np.max(np.abs(lam_new), initial=0.0) + 1e-8)
        merit0 = fx + rho * np.abs(cx).sum()
        dmerit = g @ p - rho * np.abs(cx).sum()
        alpha = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            xn = np.clip(x + alpha * p, lo, hi)
            fn = sc.f(xn)
            if fn < SENTINEL:
                cn = sc.c(xn)
                if fn + rho * np.abs(cn).sum() <= merit0 + config.armijo * alpha * min(dmerit, 0.0):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            pg = _projected_gradient(x, g, lo, hi, Jc)
            if np.max(np.abs(pg)) < config.gtol:
                converged, message = True, "line search stalled at a stationary point"
                break
            if last_drop < config.ftol * max(1.0, abs(fx)):
                # the objective has stopped decreasing; the gradient is finite-difference noise
                converged, message = True, "line search stalled after the objective stopped decreasing"
                break
            if resets < config.max_resets:
                # the quasi-Newton model has gone bad; restart it from a scaled identity
                B = fresh_b(g)
                first, resets = True, resets + 1
                continue
            message = "line search failed"
            break
        step = xn - x
        gn = sc.grad(xn, fn, config.fd_step)
        Jn = sc.jac_c(xn, cn, config.fd_step)
        if not np.all(np.isfinite(gn)):
            x, fx, cx, g, Jc = xn, fn, cn, gn, Jn
            message = "objective invalid in every direction around the iterate"
            break
        yv = (gn - (Jn.T @ lam_new if cn.size else 0.0)) - (g - (Jc.T @ lam_new if cx.size else 0.0))
        if first and yv @ step > 0:
            B = np.eye(d) * (yv @ yv) / (yv @ step)
            first = False
        Bs = B @ step
        sBs = step @ Bs
        if sBs > 0:
            # Powell damping keeps B positive definite
            sy = step @ yv
            theta_d = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
            r = theta_d * yv + (1 - theta_d) * Bs
            B = B - np.outer(Bs, Bs) / sBs + np.outer(r, r) / (step @ r)
            B = 0.5 * (B + B.T)
        last_drop = fx - fn
        x, fx, cx, g, Jc, lam = xn, fn, cn, gn, Jn, lam_new
        if np.max(np.abs(step)) < config.xtol:
            pg = _projected_gradient(x, g, lo, hi, Jc)
            if alpha == 1.0 or np.max(np.abs(pg)) < config.gtol:
                converged, message = True, "step below xtol"
                break
            if resets >= config.max_resets:
                message = "steps collapsed away from a stationary point"
                break
            B = fresh_b(g)
            first, resets = True, resets + 1
    pg = _projected_gradient(x, g, lo, hi, Jc) if np.all(np.isfinite(g)) else g
    H = None
    if with_hessian and fx < SENTINEL:
        H = fd_hessian(sc.f, x, lo, hi, config.hess_step)
        if not np.all(np.isfinite(H)) or np.max(np.abs(H)) >= SENTINEL / 1e-6:
            H = None
    return OptResult(theta=sc.theta(x), S=fx, hessian=H, iterations=it, converged=converged,
                     start_index=start_index, start=start, n_evals=sc.n_evals,
                     grad_norm=float(np.max(np.abs(pg))), message=message)


def sobol_starts(count: int, lower, upper) -> np.ndarray:
    """First ``count`` points of the unscrambled Sobol sequence mapped into the box.

    The all-zero initial point of the sequence is skipped, so the first
    start is the box centre.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    eng = qmc.Sobol(d=lower.size, scramble=False)
    eng.fast_forward(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # balance warning for non powers of two
        u = eng.random(count)
    return lower + u * (upper - lower)


@dataclass
class MultistartResult:
    best: OptResult
    results: list
    spread: float  # max relative deviation of converged optima from the best, floored at the scale
    distinct: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "spread": self.spread,
            "n_distinct_optima": len(self.distinct),
            "starts": [r.to_dict() for r in self.results],
        }


def _rel_gap(a, b, scale):
    """Per-coordinate gap relative to ``max(|b|, scale)``, i.e. relative in scaled space with a unit floor."""
    return np.abs(a - b) / np.maximum(np.abs(b), scale)


def distinct_optima(results, rtol=1e-3, scale=None):
    """Group converged optima that agree within ``rtol`` per coordinate.

    Gaps are measured relative to ``max(|theta|, scale)`` so that optima at
    zero do not split into spurious modes.
    """
    modes = []
    for r in sorted((r for r in results if r.converged), key=lambda r: r.S):
        s = np.ones_like(r.theta) if scale is None else scale
        for m in modes:
            if np.all(_rel_gap(r.theta, m.theta, s) <= rtol):
                break
        else:
            modes.append(r)
    return modes


def _run_one(args):
    problem, start, config, k = args
    return sqp_minimize(problem, start, config, start_index=k, with_hessian=False)


def multistart(problem: OptProblem, count: int = 20, config: OptConfig = OptConfig(),
               starts=None, workers: int = 1) -> MultistartResult:
    """SQP from ``count`` Sobol starts; returns the lowest-S result and all runs."""
    if starts is None:
        starts = sobol_starts(count, problem.lower, problem.upper)
    jobs = [(problem, s, config, k) for k, s in enumerate(starts)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    ok = [r for r in results if r.S < SENTINEL]
    if not ok:
        raise OptimizationFailed(f"all {len(results)} starts failed")
    pool = [r for r in ok if r.converged] or ok
    best = min(pool, key=lambda r: (r.S, r.start_index))
    # Hessian only for the winner
    sc = _Scaled(problem)
    xb = best.theta / problem.scale
    best.hessian = fd_hessian(sc.f, xb, sc.lo, sc.hi, config.hess_step)
    best.n_evals += sc.n_evals
    conv = [r for r in results if r.converged]
    spread = max((float(np.max(_rel_gap(r.theta, best.theta, problem.scale))) for r in conv), default=math.nan)
    return MultistartResult(best=best, results=results, spread=spread,
                            distinct=distinct_optima(results, scale=problem.scale))
