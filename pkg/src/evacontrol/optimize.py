"""Projections onto the admissible controls, Armijo line search and the
projected gradient method in the H^1(0,T),tau metric."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .adjoint import ReducedProblem, control_inner, h1_matrix
from .forward import ControlGrid, ForwardError
from .linalg import Factorized, SolveError

logger = logging.getLogger(__name__)

PROJ_TOL = 1e-10
PROJ_MAX_STEPS = 100


class ProjectionError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class ProjectionReport:
    iterations: int = 0
    residual: float = 0.0
    active_sizes: list = field(default_factory=list)
    multipliers: Optional[np.ndarray] = None

    def merge(self, other: "ProjectionReport"):
        self.iterations = max(self.iterations, other.iterations)
        self.residual = max(self.residual, other.residual)
        self.active_sizes.extend(other.active_sizes)


def _metric(n_nodes, tau):
    # tau^{-1} times the H^1,tau matrix: identity plus scaled second differences
    return (h1_matrix(n_nodes, tau) / tau).tocsc()


# --------------------------------------------------------------------------
# direction projection

def _ball_residual(A, u1, u2, w1, w2, lam, k):
    g = 0.5 * (w1 * w1 + w2 * w2 - 1.0)
    F = np.concatenate([A @ (w1 - u1) + lam * w1, A @ (w2 - u2) + lam * w2,
                        lam - np.maximum(0.0, lam + k * g)])
    return F, g


def _ball_newton(A, u1, u2, w1, w2, lam, tol, max_steps):
    """Semismooth Newton on the full KKT system; multipliers are kept non-negative."""
    n = len(u1)
    # complementarity scaling matched to the metric so that lam and g are comparable
    k = float(A.diagonal().max())
    # round-off grows with the data; the relative level is accepted only once Newton stalls
    floor = tol * max(1.0, float(np.linalg.norm(A @ u1) + np.linalg.norm(A @ u2)))
    trace, sizes = [], []
    for it in range(max_steps + 1):
        F, g = _ball_residual(A, u1, u2, w1, w2, lam, k)
        nF = float(np.linalg.norm(F))
        trace.append(nF)
        if nF <= tol or (nF <= floor and it > 0 and nF > 0.5 * trace[-2]):
            return w1, w2, lam, ProjectionReport(it, nF, sizes), trace
        if it == max_steps or not np.isfinite(nF):
            break
        act = lam + k * g > 0
        sizes.append(int(act.sum()))
        a = act.astype(float)
        Dl = sp.diags(lam)
        # active rows: -k (w1 dw1 + w2 dw2) = -F3 ; inactive rows: dlam = -F3
        J = sp.bmat([
            [A + Dl, None, sp.diags(w1)],
            [None, A + Dl, sp.diags(w2)],
            [sp.diags(-k * a * w1), sp.diags(-k * a * w2), sp.diags(1.0 - a)],
        ], format="csc")
        try:
            d = Factorized(J).solve(-F)
        except SolveError:
            break
        if not np.all(np.isfinite(d)):
            break
        w1, w2 = w1 + d[:n], w2 + d[n:2 * n]
        lam = np.maximum(lam + d[2 * n:], 0.0)
    raise ProjectionError(f"semismooth Newton did not converge (residual {trace[-1]:.3e})", trace)


def _ball_dual_start(A, u1, u2):
    """Approximate multipliers from the concave dual max_{lam >= 0} theta(lam),
    solved with L-BFGS-B; returns the matching primal point as well."""
    Au1, Au2 = A @ u1, A @ u2

    def primal(lam):
        lu = Factorized(A + sp.diags(lam))
        return lu.solve(Au1), lu.solve(Au2)

    def neg_theta(lam):
        w1, w2 = primal(lam)
        g = 0.5 * (w1 * w1 + w2 * w2 - 1.0)
        theta = 0.5 * ((w1 - u1) @ (A @ (w1 - u1)) + (w2 - u2) @ (A @ (w2 - u2))) + lam @ g
        return -theta, -g

    n = len(u1)
    res = minimize(neg_theta, np.zeros(n), jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * n,
                   options={"maxiter": 5000, "gtol": 1e-13, "ftol": 1e-15})
    lam = np.maximum(res.x, 0.0)
    w1, w2 = primal(lam)
    return w1, w2, lam


def project_u(u, tau, tol=PROJ_TOL, max_steps=PROJ_MAX_STEPS):
    """H^1,tau projection of directions ``u`` (N+1, M, 2) onto {|v^n| <= 1}.

    Semismooth Newton on the KKT system
    A(w - u) + lam w = 0,  lam = max(0, lam + k (|w|^2 - 1)/2),
    started at (u, 0). If that fails, Newton is restarted from multipliers
    obtained by maximizing the concave dual function with L-BFGS-B. Returns ``(w, ProjectionReport)``; the
    multipliers are in ``report.multipliers``.
    """
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite controls")
    n = u.shape[0]
    A = _metric(n, tau)
    out = np.empty_like(u)
    lam_all = np.zeros(u.shape[:2])
    report = ProjectionReport()
    for i in range(u.shape[1]):
        u1, u2 = u[:, i, 0], u[:, i, 1]
        try:
            w1, w2, lam, rep, _ = _ball_newton(A, u1, u2, u1.copy(), u2.copy(), np.zeros(n), tol, max_steps)
        except ProjectionError as first:
            logger.debug("agent %d: Newton from (u, 0) failed, restarting from a dual estimate", i)
            try:
                w1, w2, lam = _ball_dual_start(A, u1, u2)
                w1, w2, lam, rep, _ = _ball_newton(A, u1, u2, w1, w2, lam, tol, max_steps)
            except ProjectionError as exc:
                raise ProjectionError(f"agent {i}: {exc}", first.trace + exc.trace) from exc
        # remove round-off excess so emitted directions are admissible
        r = np.maximum(1.0, np.hypot(w1, w2))
        out[:, i, 0], out[:, i, 1] = w1 / r, w2 / r
        lam_all[:, i] = lam
        report.merge(rep)
    report.multipliers = lam_all
    return out, report


# --------------------------------------------------------------------------
# intensity projection

def _box_residual(A, c, d):
    return float(np.linalg.norm(d - np.clip(d - A @ (d - c), 0.0, 1.0)))


def project_c(c, tau, tol=PROJ_TOL, max_steps=PROJ_MAX_STEPS, lower=0.0, upper=1.0):
    """H^1,tau projection of intensities ``c`` (N+1, M) onto [lower, upper] by
    a primal-dual active set method."""
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite controls")
    n = c.shape[0]
    A = _metric(n, tau).tocsr()
    out = np.empty_like(c)
    report = ProjectionReport()
    for i in range(c.shape[1]):
        ci = c[:, i]
        Ac = A @ ci
        tol_i = tol * max(1.0, float(np.linalg.norm(Ac)))
        d = np.clip(ci, lower, upper)
        mu = np.zeros(n)
        trace, sizes = [], []
        k = float(A.diagonal().max())
        for it in range(max_steps + 1):
            res = _box_residual(A, ci, d)
            trace.append(res)
            if res <= tol or (res <= tol_i and it > 0 and res > 0.5 * trace[-2]):
                break
            if it == max_steps:
                raise ProjectionError(f"agent {i}: active set method did not converge", trace)
            # the natural-map residual is tested every step: at degenerate points
            # (bound attained with zero multiplier) round-off can flip the sets forever
            up = mu + k * (d - upper) > 0
            lo = mu + k * (d - lower) < 0
            sizes.append(int(up.sum() + lo.sum()))
            fixed = up | lo
            inact = ~fixed
            d = np.where(up, upper, np.where(lo, lower, 0.0))
            if inact.any():
                rhs = Ac[inact] - A[inact][:, fixed] @ d[fixed]
                d[inact] = Factorized(A[inact][:, inact]).solve(rhs)
            mu = -(A @ (d - ci))
            mu[inact] = 0.0
        d = np.clip(d, lower, upper)
        out[:, i] = d
        report.merge(ProjectionReport(it, trace[-1], sizes))
    return out, report


def project_controls(q: ControlGrid):
    u, ru = project_u(q.u, q.tau)
    c, rc = project_c(q.c, q.tau)
    return ControlGrid(u, c, q.T), (ru, rc)


# --------------------------------------------------------------------------
# line search and outer loop

@dataclass
class ArmijoResult:
    step: float
    trial: Optional[ControlGrid]
    value: float
    success: bool
    evaluations: int


def armijo_search(q: ControlGrid, grad: ControlGrid, j_value: float, evaluate: Callable,
                  s0: float = 1.0, d_param: float = 1e-4, s_min: float = 1e-12,
                  project: Callable = None) -> ArmijoResult:
    """Backtracking on s until j(P(q - s g)) <= j(q) - (d/s) ||q - P(q - s g)||^2.

    ``evaluate`` returns j at a control grid; solver failures count as +inf.
    """
    if not s0 > 0 or not 0 < d_param < 1:
        raise ValueError("need s0 > 0 and 0 < d_param < 1")
    project = project or (lambda z: project_controls(z)[0])
    s, evals = s0, 0
    while s >= s_min:
        trial = project(q.axpy(-s, grad))
        diff = q.axpy(-1.0, trial)
        dist2 = control_inner(diff, diff)
        if dist2 == 0.0:
            return ArmijoResult(s, trial, j_value, True, evals)
        try:
            jt = evaluate(trial)
        except (ForwardError, ValueError) as exc:
            logger.debug("trial step %.3g failed: %s", s, exc)
            jt = np.inf
        evals += 1
        if jt <= j_value - d_param / s * dist2:
            return ArmijoResult(s, trial, jt, True, evals)
        s *= 0.5
    return ArmijoResult(s, None, j_value, False, evals)


@dataclass
class OptimizerResult:
    controls: ControlGrid
    objective: list
    stationarity: list
    steps: list
    iterations: int
    status: str

    @property
    def success(self):
        return self.status == "stationary"


def stationarity(q: ControlGrid, grad: ControlGrid) -> float:
    """||q - P(q - grad j)|| in the combined H^1,tau norm."""
    diff = q.axpy(-1.0, project_controls(q.axpy(-1.0, grad))[0])
    return float(np.sqrt(control_inner(diff, diff)))


def projected_gradient(problem: ReducedProblem, q0: ControlGrid, max_iter: int = 50,
                       tol: float = 1e-3, d_param: float = 1e-4, callback: Callable = None) -> OptimizerResult:
    """Projected gradient method with Armijo steps.

    Stops with status ``stationary`` once the projected gradient measure is
    at most ``tol``, ``max_iterations`` after ``max_iter`` steps, or
    ``line_search_failed``.
    """
    q = project_controls(q0)[0]
    j = problem.value(q)
    obj, stat, steps = [j], [], []
    s_last = 0.5
    status = "max_iterations"
    k = 0
    while True:
        g = problem.gradient(q).grad
        st = stationarity(q, g)
        stat.append(st)
        logger.info("iter %d  J = %.8g  stationarity = %.3e", k, j, st)
        if callback is not None:
            callback(k, q, j, st)
        if st <= tol:
            status = "stationary"
            break
        if k >= max_iter:
            break
        ls = armijo_search(q, g, j, problem.value, s0=2.0 * s_last, d_param=d_param)
        if not ls.success:
            status = "line_search_failed"
            break
        q, j, s_last = ls.trial, ls.value, ls.step
        obj.append(j)
        steps.append(ls.step)
        k += 1
    return OptimizerResult(controls=q, objective=obj, stationarity=stat, steps=steps,
                           iterations=k, status=status)
