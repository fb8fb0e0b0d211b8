"""Fully discrete forward solver: transport step, Eikonal Newton solve,
implicit agent update and the decoupled time sweep."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .linalg import Factorized, SolveError, assemble, solve
from .mesh import EXIT, GeometryCache, Mollifier, TriMesh, cfl_max_tau, compute_geometry
from .model import ModelParams, beta_cellwise, f_eval, p1_gradient, p1_stiffness, solve_barrier

logger = logging.getLogger(__name__)

EIKONAL_TOL = 1e-10
EIKONAL_MAX_STEPS = 50
AGENT_TOL = 1e-12
AGENT_MAX_ITERS = 100


class ForwardError(RuntimeError):
    """Failure inside the forward sweep; ``step`` is the time index if known."""

    def __init__(self, message, step=None, history=None):
        if step is not None:
            message = f"time step {step}: {message}"
        super().__init__(message)
        self.step = step
        self.history = history or []


class EikonalError(ForwardError):
    pass


class AgentStepError(ForwardError):
    pass


# --------------------------------------------------------------------------
# controls

@dataclass
class ControlGrid:
    """Agent directions ``u`` (N+1, M, 2) and intensities ``c`` (N+1, M) on the
    uniform time grid t_n = n T / N."""

    u: np.ndarray
    c: np.ndarray
    T: float

    def __post_init__(self):
        self.u = np.array(self.u, dtype=float)
        self.c = np.array(self.c, dtype=float)
        if self.u.ndim != 3 or self.u.shape[2] != 2:
            raise ValueError(f"u must have shape (N+1, M, 2), got {self.u.shape}")
        if self.c.shape != self.u.shape[:2]:
            raise ValueError(f"c must have shape {self.u.shape[:2]}, got {self.c.shape}")
        if self.u.shape[0] < 1:
            raise ValueError("control grid needs at least one time node")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.c))):
            raise ValueError("controls must be finite")
        if not self.T > 0:
            raise ValueError("time horizon must be positive")

    @classmethod
    def constant(cls, N, u, c, T):
        u = np.asarray(u, dtype=float).reshape(-1, 2)
        c = np.broadcast_to(np.asarray(c, dtype=float), (len(u),))
        return cls(np.repeat(u[None], N + 1, axis=0), np.repeat(c[None], N + 1, axis=0), T)

    @property
    def N(self):
        return self.u.shape[0] - 1

    @property
    def n_agents(self):
        return self.u.shape[1]

    @property
    def tau(self):
        return self.T / self.N if self.N else self.T

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.N + 1)

    def copy(self):
        return ControlGrid(self.u.copy(), self.c.copy(), self.T)

    def axpy(self, s, other):
        """Return ``self + s * other`` for another control grid (or gradient)."""
        return ControlGrid(self.u + s * other.u, self.c + s * other.c, self.T)


# --------------------------------------------------------------------------
# discretization

class Discretization:
    """Mesh-dependent operators shared by all sweeps for a fixed (mesh, params, T, N).

    Parameters
    ----------
    mesh : TriMesh
    params : ModelParams
    T : float
        Time horizon.
    N : int
        Number of time steps.
    mask : bool array, optional
        Triangles contributing to the density term of the objective.
    """

    def __init__(self, mesh: TriMesh, params: ModelParams, T: float, N: int,
                 geom: Optional[GeometryCache] = None, mask=None):
        if N < 0 or int(N) != N:
            raise ValueError("number of time steps must be a non-negative integer")
        if not T > 0:
            raise ValueError("time horizon must be positive")
        self.mesh = mesh
        self.params = params
        self.geom = geom if geom is not None else compute_geometry(mesh)
        self.T = float(T)
        self.N = int(N)
        self.tau = self.T / self.N if self.N else self.T
        self.cfl = cfl_max_tau(self.geom)
        if params.v0 > 1.0:
            logger.warning("v0 = %g > 1: the bound-preservation guarantee does not cover this case", params.v0)

        nt = mesh.n_triangles
        self.mask = np.ones(nt, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != (nt,):
            raise ValueError(f"observation mask must have {nt} entries")

        self.mass_diag = self.geom.area
        self.M = sp.diags(self.mass_diag).tocsr()
        self.A = assemble_diffusion(mesh, self.geom, params.eps, params.gamma)
        self.S = (self.M + self.tau * self.A).tocsc()
        self.S_lu = Factorized(self.S)

        self.free = ~mesh.dirichlet
        if not mesh.dirichlet.any():
            raise ValueError("mesh has no exit faces; the Eikonal problem needs Dirichlet vertices")
        self.K = p1_stiffness(mesh, self.geom)
        self.K_ff = self.K[self.free][:, self.free].tocsc()
        tri = mesh.triangles
        self._rows = np.repeat(tri, 3, axis=1).ravel()
        self._cols = np.tile(tri, (1, 3)).ravel()
        self._jacobian_pattern()
        self.xi = solve_barrier(mesh, self.geom, params.delta4)
        self.mollifier = Mollifier(mesh, self.geom, params.zeta)

    @property
    def times(self):
        return np.arange(self.N + 1) * self.tau

    def mass(self, rho):
        return float(self.mass_diag @ rho)

    # -- Eikonal pieces ----------------------------------------------------

    def eikonal_source(self, rho):
        """s_T = 1 / (f(rho_T)^2 + delta2) and its rho-derivative."""
        fv, fp = f_eval(rho)
        den = fv * fv + self.params.delta2
        return 1.0 / den, -2.0 * fv * fp / den ** 2

    def eikonal_residual(self, phi, s, delta1=None):
        delta1 = self.params.delta1 if delta1 is None else delta1
        G = p1_gradient(self.geom, self.mesh.triangles, phi)
        loc = self.geom.area / 3.0 * (np.sum(G * G, axis=1) - s)
        R = delta1 * (self.K @ phi)
        R += np.bincount(self.mesh.triangles.ravel(), weights=np.repeat(loc, 3),
                         minlength=self.mesh.n_vertices)
        return R[self.free]

    def _jacobian_pattern(self):
        # CSC pattern of the free-free block and the slot of every local 3x3 entry in it
        nf = int(self.free.sum())
        fidx = np.full(self.mesh.n_vertices, -1)
        fidx[self.free] = np.arange(nf)
        r, c = fidx[self._rows], fidx[self._cols]
        self._jkeep = np.flatnonzero((r >= 0) & (c >= 0))
        keys = c[self._jkeep] * nf + r[self._jkeep]
        ukeys, self._jslot = np.unique(keys, return_inverse=True)
        self._jind = ukeys % nf
        self._jptr = np.searchsorted(ukeys // nf, np.arange(nf + 1))
        self._jshape = (nf, nf)
        G = self.geom.basis_gradients
        self._klocal = (self.geom.area[:, None, None] * np.einsum("tad,tbd->tab", G, G)).ravel()

    def eikonal_jacobian(self, phi, delta1=None):
        """Jacobian of the free residual w.r.t. free values of phi."""
        delta1 = self.params.delta1 if delta1 is None else delta1
        G = p1_gradient(self.geom, self.mesh.triangles, phi)
        coupling = np.einsum("td,tbd->tb", G, self.geom.basis_gradients)
        vals = (2.0 * self.geom.area / 3.0)[:, None, None] * coupling[:, None, :]
        local = delta1 * self._klocal + np.broadcast_to(vals, (len(G), 3, 3)).ravel()
        data = np.bincount(self._jslot, weights=local[self._jkeep], minlength=len(self._jind))
        return sp.csc_matrix((data, self._jind, self._jptr), shape=self._jshape)

    def eikonal_rho_jacobian(self, rho):
        """d residual (free rows) / d rho as a sparse (n_free, nt) matrix."""
        _, ds = self.eikonal_source(rho)
        nt = self.mesh.n_triangles
        vals = np.repeat(-self.geom.area / 3.0 * ds, 3)
        R = assemble((self.mesh.triangles.ravel(), np.repeat(np.arange(nt), 3), vals),
                     (self.mesh.n_vertices, nt))
        return R[self.free]


# --------------------------------------------------------------------------
# matrices

def assemble_diffusion(mesh: TriMesh, geom: GeometryCache, eps: float, gamma: float) -> sp.csr_matrix:
    """Two-point diffusion plus exit outflow matrix A (symmetric)."""
    if eps < 0 or gamma < 0:
        raise ValueError("eps and gamma must be non-negative")
    nt = mesh.n_triangles
    t1, t2 = mesh.face_cells.T
    w = eps * geom.transmissibility * mesh.face_lengths
    exit_f = mesh.bface_tags == EXIT
    out = np.bincount(mesh.bface_cells[exit_f], weights=gamma * mesh.bface_lengths[exit_f], minlength=nt)
    diag = np.bincount(t1, weights=w, minlength=nt) + np.bincount(t2, weights=w, minlength=nt) + out
    rows = np.concatenate([np.arange(nt), t1, t2])
    cols = np.concatenate([np.arange(nt), t2, t1])
    vals = np.concatenate([diag, -w, -w])
    return assemble((rows, cols, vals), (nt, nt))


def _face_flux_terms(mesh, beta):
    n = mesh.face_normals
    L = mesh.face_lengths
    t1, t2 = mesh.face_cells.T
    return t1, t2, L, L * np.sum(beta[t1] * n, axis=1), L * np.sum(beta[t2] * n, axis=1)


def assemble_advection(mesh: TriMesh, geom: GeometryCache, beta, eta: float) -> sp.csr_matrix:
    """Lax-Friedrichs advection matrix B for the cellwise direction ``beta``.

    The transported velocity is ``-beta``; only interior faces carry flux.
    """
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("non-finite transport direction")
    nt = mesh.n_triangles
    t1, t2, L, b1, b2 = _face_flux_terms(mesh, beta)
    rows = np.concatenate([t1, t1, t2, t2])
    cols = np.concatenate([t1, t2, t2, t1])
    vals = np.concatenate([-0.5 * (b1 - eta * L), -0.5 * (b2 + eta * L),
                           0.5 * (b2 + eta * L), 0.5 * (b1 - eta * L)])
    return assemble((rows, cols, vals), (nt, nt))


def transport_step(disc: Discretization, rho, B) -> np.ndarray:
    """Solve (M + tau A) rho^{n+1} = (M - tau B) rho^n with the stored factorization."""
    rhs = disc.mass_diag * rho - disc.tau * (B @ rho)
    out = disc.S_lu.solve(rhs)
    res = np.linalg.norm(disc.S @ out - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not res <= 1e-10:
        raise SolveError(f"transport solve residual {res:.3e}", res)
    return out


# --------------------------------------------------------------------------
# Eikonal

@dataclass
class EikonalInfo:
    iterations: int
    residual: float
    history: list


def _newton(disc, s, phi, delta1, tol, max_steps):
    """Damped Newton from ``phi``; returns (phi, residual, history, iterations)."""
    free = disc.free
    R = disc.eikonal_residual(phi, s, delta1)
    nr = float(np.linalg.norm(R))
    history = [nr]
    it = 0
    while nr > tol:
        if it >= max_steps:
            raise EikonalError(f"Newton did not reach {tol:.1e} in {max_steps} steps "
                               f"(last residual {nr:.3e})", history=history)
        J = disc.eikonal_jacobian(phi, delta1)
        try:
            d = Factorized(J).solve(-R)
        except SolveError as exc:
            raise EikonalError(f"singular Newton system: {exc}", history=history) from exc
        step = 1.0
        while True:
            trial = phi.copy()
            trial[free] += step * d
            Rt = disc.eikonal_residual(trial, s, delta1)
            nt_ = float(np.linalg.norm(Rt))
            if nt_ <= (1.0 - 1e-4 * step) * nr or nt_ <= tol:
                break
            step *= 0.5
            if step < 1e-10:
                raise EikonalError(f"line search stalled at residual {nr:.3e}", history=history)
        phi, R, nr = trial, Rt, nt_
        history.append(nr)
        it += 1
    return phi, R, history, it


def _linearized_start(disc, s, delta1):
    phi = np.zeros(disc.mesh.n_vertices)
    load = np.bincount(disc.mesh.triangles.ravel(), weights=np.repeat(disc.geom.area / 3.0 * s, 3),
                       minlength=disc.mesh.n_vertices)
    phi[disc.free] = solve(delta1 * disc.K_ff, load[disc.free])
    return phi


CONTINUATION = (10.0, 5.0, 2.5, 1.5, 1.0)


def solve_eikonal(disc: Discretization, rho, warm_start=None, tol=EIKONAL_TOL,
                  max_steps=EIKONAL_MAX_STEPS):
    """Damped Newton solve of the regularized P1 Eikonal problem.

    Without ``warm_start`` the first iterate solves the problem with the
    quadratic term dropped. If Newton fails, the solve is repeated along a
    continuation path that starts from a larger viscosity ``delta1`` and
    reduces it to the target value. Returns ``(phi, EikonalInfo)``.
    """
    s, _ = disc.eikonal_source(rho)
    delta1 = disc.params.delta1
    if warm_start is None:
        phi = _linearized_start(disc, s, delta1)
    else:
        phi = np.zeros(disc.mesh.n_vertices)
        phi[disc.free] = np.asarray(warm_start)[disc.free]
    try:
        phi, R, history, it = _newton(disc, s, phi, delta1, tol, max_steps)
    except EikonalError as first:
        logger.debug("Eikonal Newton failed (%s); using viscosity continuation", first)
        history = list(first.history)
        it = 0
        phi = _linearized_start(disc, s, CONTINUATION[0] * delta1)
        try:
            for factor in CONTINUATION:
                phi, R, h, k = _newton(disc, s, phi, factor * delta1, tol, max_steps)
                history += h
                it += k
        except EikonalError as exc:
            raise EikonalError(f"{first}; continuation failed at delta1 = {factor * delta1:.3g}: {exc}",
                               history=history + exc.history) from exc
    nr = history[-1]

    # one extra full step so downstream derivatives see a fully converged solve
    J = disc.eikonal_jacobian(phi, delta1)
    trial = phi.copy()
    trial[disc.free] += Factorized(J).solve(-R)
    nt_ = float(np.linalg.norm(disc.eikonal_residual(trial, s, delta1)))
    if nt_ <= nr:
        phi, nr = trial, nt_
        history.append(nr)
    return phi, EikonalInfo(iterations=it, residual=float(nr), history=history)


# --------------------------------------------------------------------------
# agents

def agent_step(disc: Discretization, x_prev, rho_next, u_next, tol=AGENT_TOL, max_iters=AGENT_MAX_ITERS):
    """Implicit agent update by fixed-point iteration, independently per agent."""
    x_prev = np.asarray(x_prev, dtype=float).reshape(-1, 2)
    u_next = np.asarray(u_next, dtype=float).reshape(-1, 2)
    if np.any(np.linalg.norm(u_next, axis=1) > 1.0 + 1e-12):
        raise ValueError("agent directions must satisfy |u| <= 1")
    scale = disc.tau * disc.params.v0
    out = x_prev.copy()
    for i in range(len(x_prev)):
        if not np.any(u_next[i]):
            continue
        x = x_prev[i].copy()
        prev_inc, growth = np.inf, 0
        for _ in range(max_iters):
            m = disc.mollifier.eval_cells(rho_next, x)[0]
            x_new = x_prev[i] + scale * f_eval(m)[0] * u_next[i]
            inc = float(np.linalg.norm(x_new - x))
            x = x_new
            if inc <= tol:
                break
            growth = growth + 1 if inc > prev_inc else 0
            if growth >= 5:
                raise AgentStepError(f"agent {i}: fixed-point iteration is not contracting; reduce tau")
            prev_inc = inc
        out[i] = x
    return out


# --------------------------------------------------------------------------
# sweep

@dataclass
class StateTrajectory:
    """Density ``rho`` (N+1, nt), potential ``phi`` (N, nv), agents ``x`` (N+1, M, 2)."""

    rho: np.ndarray
    phi: np.ndarray
    x: np.ndarray
    times: np.ndarray
    mass: np.ndarray
    rho_min: np.ndarray
    rho_max: np.ndarray
    eikonal_iterations: np.ndarray
    eikonal_residuals: np.ndarray
    phi_final: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self):
        return len(self.rho) - 1


def _check_initial(disc, rho0, x0, controls):
    rho0 = np.asarray(rho0, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(-1, 2)
    if rho0.shape != (disc.mesh.n_triangles,):
        raise ValueError("initial density must have one value per triangle")
    if controls.N != disc.N:
        raise ValueError(f"control grid has N={controls.N}, discretization N={disc.N}")
    if controls.n_agents != len(x0):
        raise ValueError(f"{controls.n_agents} controlled agents but {len(x0)} initial positions")
    return rho0, x0


def forward_sweep(disc: Discretization, controls: ControlGrid, rho0, x0,
                  final_potential=False) -> StateTrajectory:
    """Run rho^0, x^0 -> phi^0 -> rho^1 -> x^1 -> phi^1 -> ... -> rho^N -> x^N."""
    rho0, x0 = _check_initial(disc, rho0, x0, controls)
    N, p = disc.N, disc.params
    rho = np.empty((N + 1, len(rho0)))
    phi = np.empty((N, disc.mesh.n_vertices))
    x = np.empty((N + 1,) + x0.shape)
    iters = np.zeros(N, dtype=int)
    res = np.zeros(N)
    rho[0], x[0] = rho0, x0
    warm = None
    for n in range(N):
        try:
            phi[n], info = solve_eikonal(disc, rho[n], warm)
            iters[n], res[n] = info.iterations, info.residual
            bf = beta_cellwise(disc.mesh, disc.geom, rho[n], phi[n], x[n], controls.c[n], p)
            B = assemble_advection(disc.mesh, disc.geom, bf.beta, p.eta)
            rho[n + 1] = transport_step(disc, rho[n], B)
            x[n + 1] = agent_step(disc, x[n], rho[n + 1], controls.u[n + 1])
        except ForwardError as exc:
            raise type(exc)(str(exc), step=n, history=exc.history) from exc
        except (SolveError, ValueError) as exc:
            raise ForwardError(str(exc), step=n) from exc
        warm = phi[n]
    phi_final = None
    if final_potential:
        phi_final, _ = solve_eikonal(disc, rho[N], warm)
    mass = rho @ disc.mass_diag
    return StateTrajectory(rho=rho, phi=phi, x=x, times=disc.times, mass=mass,
                           rho_min=rho.min(axis=1), rho_max=rho.max(axis=1),
                           eikonal_iterations=iters, eikonal_residuals=res, phi_final=phi_final)
