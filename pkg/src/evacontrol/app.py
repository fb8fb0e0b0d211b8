"""Simulation and optimization runs that write a reproducible output bundle.

Bundle layout (inside the output directory)::

    snapshots/state_NNNN.vtk   density (cell data) and potential (point data)
    agents.csv                 k, t, x_i, y_i
    series.csv                 k, t, mass, rho_min, rho_max
    control.csv                k, Ag_ux_i, Ag_uy_i, Ag_int_i
    history.csv                optimize only: iteration, objective, stationarity, step
    summary.json

Files contain no timestamps or timings, so identical configurations give
bit-identical bundles.
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .adjoint import objective_terms
from .forward import ControlGrid, StateTrajectory, forward_sweep
from .io import control_columns, write_table, write_vtk
from .optimize import projected_gradient
from .scenario import Scenario, ScenarioConfig, build

logger = logging.getLogger(__name__)


def _snapshot_steps(N, stride):
    if stride < 1:
        raise ValueError("snapshot stride must be at least 1")
    steps = list(range(0, N + 1, stride))
    if steps[-1] != N:
        steps.append(N)
    return steps


def write_bundle(out_dir, sc: Scenario, q: ControlGrid, traj: StateTrajectory, stride: int,
                 vtk: bool = True, extra: Optional[dict] = None) -> dict:
    """Write snapshots, series, agent paths, controls and ``summary.json``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh, N = sc.mesh, traj.N
    if vtk:
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for n in _snapshot_steps(N, stride):
            phi = traj.phi[n] if n < N else traj.phi_final
            write_vtk(snap / f"state_{n:04d}.vtk", mesh, cell_data={"rho": traj.rho[n]},
                      point_data={"phi": phi} if phi is not None else None,
                      title=f"{sc.config.name} step {n} t={traj.times[n]!r}")
    k = np.arange(N + 1)
    agents = {"k": k, "t": traj.times}
    for i in range(traj.x.shape[1]):
        agents[f"x_{i}"] = traj.x[:, i, 0]
        agents[f"y_{i}"] = traj.x[:, i, 1]
    write_table(out / "agents.csv", agents)
    write_table(out / "series.csv", {"k": k, "t": traj.times, "mass": traj.mass,
                                     "rho_min": traj.rho_min, "rho_max": traj.rho_max})
    write_table(out / "control.csv", control_columns(q.u, q.c))

    terms = objective_terms(sc.disc, traj, q)
    summary = {
        "name": sc.config.name,
        "n_triangles": int(mesh.n_triangles),
        "n_vertices": int(mesh.n_vertices),
        "n_agents": int(q.n_agents),
        "T": float(sc.disc.T),
        "N": int(N),
        "tau": float(sc.disc.tau),
        "tau_bound": float(sc.disc.cfl),
        "objective": float(terms.total),
        "objective_terms": {"density": float(terms.density), "barrier": float(terms.barrier),
                            "control_u": float(terms.control_u), "control_c": float(terms.control_c)},
        "mass_initial": float(traj.mass[0]),
        "mass_final": float(traj.mass[-1]),
        "rho_min": float(traj.rho_min.min()),
        "rho_max": float(traj.rho_max.max()),
        "eikonal_max_residual": float(traj.eikonal_residuals.max()) if N else 0.0,
        "eikonal_max_iterations": int(traj.eikonal_iterations.max()) if N else 0,
    }
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_simulate(cfg: ScenarioConfig, out_dir, snapshot_stride: Optional[int] = None) -> dict:
    """Forward simulation with the configured controls."""
    sc = build(cfg)
    traj = forward_sweep(sc.disc, sc.controls, sc.rho0, sc.x0, final_potential=True)
    stride = snapshot_stride or cfg.output.snapshot_stride
    return write_bundle(out_dir, sc, sc.controls, traj, stride, vtk=cfg.output.vtk)


def run_optimize(cfg: ScenarioConfig, out_dir, snapshot_stride: Optional[int] = None,
                 max_iter: Optional[int] = None, tol: Optional[float] = None) -> dict:
    """Projected gradient optimization followed by a simulation with the optimized controls.

    Terminal optimizer statuses (``stationary``, ``max_iterations``,
    ``line_search_failed``) are recorded in the summary; only solver
    failures raise.
    """
    sc = build(cfg)
    opt = cfg.optimizer
    max_iter = opt.max_iter if max_iter is None else max_iter
    tol = opt.tol if tol is None else tol
    problem = sc.problem()
    res = projected_gradient(problem, sc.controls, max_iter=max_iter, tol=tol, d_param=opt.d_param)
    logger.info("optimizer: %s after %d iterations, J %.8g -> %.8g",
                res.status, res.iterations, res.objective[0], res.objective[-1])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_hist = len(res.objective)
    write_table(out / "history.csv", {
        "iteration": np.arange(n_hist),
        "objective": np.asarray(res.objective, dtype=float),
        "stationarity": np.asarray(res.stationarity[:n_hist] + [np.nan] * (n_hist - len(res.stationarity)),
                                   dtype=float),
        "step": np.asarray([0.0] + list(res.steps), dtype=float),
    })
    traj = forward_sweep(sc.disc, res.controls, sc.rho0, sc.x0, final_potential=True)
    extra = {"status": res.status, "iterations": int(res.iterations),
             "objective_initial": float(res.objective[0]),
             "stationarity_final": float(res.stationarity[-1]),
             "forward_solves": int(problem.n_forward), "adjoint_solves": int(problem.n_adjoint)}
    stride = snapshot_stride or cfg.output.snapshot_stride
    return write_bundle(out, sc, res.controls, traj, stride, vtk=cfg.output.vtk, extra=extra)
