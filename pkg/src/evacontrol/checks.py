"""Invariant-check harness behind ``evacontrol check``.

Each check returns a small record ``{name, passed, value, threshold, detail}``;
:func:`run_check` collects them into a JSON-serializable report. Two
injections exist for testing the harness itself: ``box`` (no upwinding and a
time step five times the bound) and ``adjoint_sign`` (one adjoint term with
the wrong sign).
"""

import logging
from typing import Optional

import numpy as np

from .adjoint import StepLinearization, h1_matrix
from .forward import (ControlGrid, Discretization, ForwardError, agent_step, assemble_advection,
                      forward_sweep, solve_eikonal, transport_step)
from .linalg import check_m_matrix
from .model import beta_cellwise
from .optimize import ProjectionError, project_c, project_u
from .scenario import PRESETS, ScenarioConfig, build, config_from_dict

logger = logging.getLogger(__name__)

INJECTIONS = ("box", "adjoint_sign")

MASS_TOL = 1e-12
BOX_TOL = 1e-10
EIKONAL_RESIDUAL_TOL = 1e-10
FD_TOL = 1e-4
DOT_TOL = 1e-10
KKT_TOL = 1e-10

DEFAULT_CHECK = {
    "name": "check",
    "geometry": {
        "width": 8.0, "height": 6.0, "target_length": 0.75,
        "exits": [{"side": "east", "start": 2.0, "end": 4.0},
                  {"side": "north", "start": 1.0, "end": 2.5}],
    },
    "model": PRESETS["example1"]["model"],
    "time": {"T": 0.5, "N": 20},
    "agents": [[3.0, 2.5], [4.5, 3.5]],
    "initial_density": [{"center": [3.0, 3.0], "variance": 1.0, "amplitude": 0.7},
                        {"center": [5.5, 2.0], "variance": 0.6, "amplitude": 0.5}],
    "controls": {"u": [[0.6, 0.2], [0.1, -0.5]], "c": [0.5, 0.4]},
}


def default_check_config() -> ScenarioConfig:
    """Coarse scenario: 8 x 6 room, about 200 triangles, N = 20, two agents."""
    import copy
    return config_from_dict(copy.deepcopy(DEFAULT_CHECK))


def _record(name, value, threshold, passed=None, detail=""):
    value = float(value)
    if passed is None:
        passed = bool(np.isfinite(value) and value <= threshold)
    return {"name": name, "passed": bool(passed), "value": value, "threshold": float(threshold), "detail": detail}


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _coupled_extrema(disc, q, rho0, x0):
    """Step the coupled system, tracking min/max of rho; stops at the first solver failure."""
    p = disc.params
    rho, x, phi = np.asarray(rho0, dtype=float), np.asarray(x0, dtype=float), None
    lo, hi = float(rho.min()), float(rho.max())
    for n in range(disc.N):
        try:
            phi, _ = solve_eikonal(disc, rho, phi)
            bf = beta_cellwise(disc.mesh, disc.geom, rho, phi, x, q.c[n], p)
            rho = transport_step(disc, rho, assemble_advection(disc.mesh, disc.geom, bf.beta, p.eta))
            lo, hi = min(lo, float(rho.min())), max(hi, float(rho.max()))
            x = agent_step(disc, x, rho, q.u[n + 1])
        except (ForwardError, ValueError) as exc:
            return lo, hi, f"stopped at step {n}: {exc}"
    return lo, hi, ""


def check_mass(sc):
    disc = sc.disc
    d0 = Discretization(disc.mesh, disc.params.replace(gamma=0.0), disc.T, disc.N, geom=disc.geom, mask=disc.mask)
    traj = forward_sweep(d0, sc.controls, sc.rho0, sc.x0)
    drift = np.max(np.abs(traj.mass - traj.mass[0])) / traj.mass[0]
    return _record("mass", drift, MASS_TOL, detail="relative mass drift with gamma = 0")


def check_box(sc, inject=False):
    disc, q = sc.disc, sc.controls
    if inject:
        T = 5.0 * disc.cfl * disc.N
        disc = Discretization(disc.mesh, disc.params.replace(eta=0.0), T, disc.N, geom=disc.geom, mask=disc.mask)
        q = ControlGrid(q.u, q.c, T)
    lo, hi, note = _coupled_extrema(disc, q, sc.rho0, sc.x0)
    excess = max(-lo, hi - 1.0, 0.0)
    detail = f"min {lo:.3e}, max {hi:.6g}, tau/bound {disc.tau / disc.cfl:.3g}"
    if note:
        detail += f"; {note}"
    return _record("box", excess, BOX_TOL, detail=detail)


def check_m_structure(sc):
    disc = sc.disc
    rep = check_m_matrix(disc.M + disc.tau * disc.A)
    n_bad = len(rep.nonpositive_diagonal) + len(rep.positive_offdiagonal) + len(rep.not_dominant_rows)
    return _record("m_matrix", n_bad, 0, passed=rep.is_m_matrix,
                   detail="M + tau A" + ("" if rep.is_m_matrix else f"; offending rows {rep.not_dominant_rows}"))


def check_eikonal(traj):
    return _record("eikonal_residual", traj.eikonal_residuals.max(), EIKONAL_RESIDUAL_TOL,
                   detail=f"max Newton iterations {int(traj.eikonal_iterations.max())}")


def check_adjoint_tangent(sc, traj, rng, mutation=None):
    """Per-step dot-product test <vjp(bar), d> = <bar, jvp(d)>."""
    disc, q = sc.disc, sc.controls
    nt, M = disc.mesh.n_triangles, q.n_agents
    worst = 0.0
    for n in range(disc.N):
        lin = StepLinearization(disc, traj, q, n, mutation=mutation)
        drho, dx, dc, du = rng.standard_normal(nt), rng.standard_normal((M, 2)), \
            rng.standard_normal(M), rng.standard_normal((M, 2))
        rb, xb = rng.standard_normal(nt), rng.standard_normal((M, 2))
        r1, x1 = lin.jvp(drho, dx, dc, du)
        (ro, xo, co, uo), _ = lin.vjp(rb, xb)
        lhs = float(rb @ r1 + np.sum(xb * x1))
        rhs = float(ro @ drho + np.sum(xo * dx) + co @ dc + np.sum(uo * du))
        worst = max(worst, _rel(lhs, rhs))
    return _record("adjoint_tangent", worst, DOT_TOL, detail=f"{disc.N} steps")


def check_gradient_fd(sc, rng, mutation=None, n_dirs=4, h=1e-5):
    """Euclidean gradient against central differences in random directions."""
    prob = sc.problem(mutation=mutation)
    q = sc.controls
    eu = prob.gradient(q).euclidean
    worst = 0.0
    for _ in range(n_dirs):
        dq = ControlGrid(rng.standard_normal(q.u.shape), rng.standard_normal(q.c.shape), q.T)
        ad = float(np.sum(eu.u * dq.u) + np.sum(eu.c * dq.c))
        fd = (prob.value(q.axpy(h, dq)) - prob.value(q.axpy(-h, dq))) / (2.0 * h)
        worst = max(worst, _rel(ad, fd))
    return _record("gradient_fd", worst, FD_TOL, detail=f"{n_dirs} directions, h = {h:g}")


def ball_kkt_residual(u, w, lam, tau):
    """Max of stationarity, feasibility and complementarity violations for the direction projection."""
    A = h1_matrix(u.shape[0], tau) / tau
    out = 0.0
    for i in range(u.shape[1]):
        stat = A @ (w[:, i] - u[:, i]) + lam[:, i, None] * w[:, i]
        g = np.sum(w[:, i] ** 2, axis=1) - 1.0
        out = max(out, np.abs(stat).max(), np.maximum(g, 0).max(), np.maximum(-lam[:, i], 0).max(),
                  np.abs(lam[:, i] * g).max())
    return float(out)


def box_kkt_residual(c, d, tau, lower=0.0, upper=1.0):
    """Natural-map residual ||d - clip(d - A (d - c))|| of the intensity projection."""
    A = h1_matrix(c.shape[0], tau) / tau
    return float(max(np.linalg.norm(d[:, i] - np.clip(d[:, i] - A @ (d[:, i] - c[:, i]), lower, upper))
                     for i in range(c.shape[1])))


def check_projection(rng, n_cases=5, N=50, M=2, T=1.0):
    tau = T / N
    worst_kkt = worst_idem = 0.0
    try:
        for _ in range(n_cases):
            u = 1.5 * rng.standard_normal((N + 1, M, 2))
            c = rng.uniform(-0.5, 1.5, (N + 1, M))
            w, rep = project_u(u, tau)
            d, _ = project_c(c, tau)
            worst_kkt = max(worst_kkt, ball_kkt_residual(u, w, rep.multipliers, tau), box_kkt_residual(c, d, tau))
            w2, _ = project_u(w, tau)
            d2, _ = project_c(d, tau)
            worst_idem = max(worst_idem, np.abs(w2 - w).max(), np.abs(d2 - d).max())
    except ProjectionError as exc:
        return _record("projection_kkt", np.inf, KKT_TOL, passed=False, detail=str(exc))
    return _record("projection_kkt", max(worst_kkt, worst_idem), KKT_TOL,
                   detail=f"KKT {worst_kkt:.2e}, idempotence {worst_idem:.2e}")


def run_check(cfg: Optional[ScenarioConfig] = None, inject: Optional[str] = None, seed: int = 0) -> dict:
    """Run all invariant checks on ``cfg`` (default: :func:`default_check_config`).

    Returns ``{"scenario", "inject", "passed", "checks": [...]}``.
    """
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection {inject!r}; choose from {INJECTIONS}")
    cfg = cfg if cfg is not None else default_check_config()
    sc = build(cfg)
    rng = np.random.default_rng(seed)
    mutation = "flip_advection_beta" if inject == "adjoint_sign" else None
    checks = [check_mass(sc), check_box(sc, inject=inject == "box"), check_m_structure(sc)]
    try:
        traj = forward_sweep(sc.disc, sc.controls, sc.rho0, sc.x0)
    except ForwardError as exc:
        checks.append(_record("forward", np.inf, 0.0, passed=False, detail=str(exc)))
    else:
        checks += [check_eikonal(traj), check_adjoint_tangent(sc, traj, rng, mutation),
                   check_gradient_fd(sc, rng, mutation)]
    checks.append(check_projection(rng))
    for c in checks:
        logger.info("%-18s %s  %.3e (<= %.1e)  %s", c["name"], "PASS" if c["passed"] else "FAIL",
                    c["value"], c["threshold"], c["detail"])
    return {"scenario": cfg.name, "inject": inject, "passed": all(c["passed"] for c in checks), "checks": checks}
