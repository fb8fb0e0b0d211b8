"""Discrete objective, tangent and adjoint sweeps and the H^1(0,T) gradient.

Each forward time step maps ``(rho^n, x^n, c^n, u^{n+1})`` to
``(rho^{n+1}, x^{n+1})`` with the potential ``phi^n`` as an internal
unknown. :class:`StepLinearization` provides the exact Jacobian-vector
product of that map and its transpose; the sweeps chain them.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .forward import ControlGrid, Discretization, StateTrajectory, assemble_advection, forward_sweep
from .linalg import Factorized
from .model import beta_cellwise, f_eval, p1_gradient

MUTATIONS = (None, "flip_advection_beta")


# --------------------------------------------------------------------------
# H^1(0,T),tau inner product

def h1_matrix(n_nodes: int, tau: float) -> sp.csc_matrix:
    """Matrix of the discrete H^1 inner product: tau I + tau^{-1} (second differences)."""
    if n_nodes == 1:
        return sp.csc_matrix(np.array([[tau]]))
    main = np.full(n_nodes, 2.0)
    main[[0, -1]] = 1.0
    lap = sp.diags([main, -np.ones(n_nodes - 1), -np.ones(n_nodes - 1)], [0, 1, -1])
    return (tau * sp.identity(n_nodes) + lap / tau).tocsc()


def h1_inner(a, b, tau: float) -> float:
    """tau sum_n a^n.b^n + tau^{-1} sum_n (a^{n+1}-a^n).(b^{n+1}-b^n); time is axis 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid functions differ in shape: {a.shape} vs {b.shape}")
    return float(tau * np.sum(a * b) + np.sum(np.diff(a, axis=0) * np.diff(b, axis=0)) / tau)


def control_inner(p: ControlGrid, q: ControlGrid) -> float:
    """Combined H^1,tau inner product on the control space."""
    return h1_inner(p.u, q.u, p.tau) + h1_inner(p.c, q.c, p.tau)


# --------------------------------------------------------------------------
# objective

@dataclass
class ObjectiveTerms:
    density: float
    barrier: float
    control_u: float
    control_c: float

    @property
    def total(self):
        return self.density + self.barrier + self.control_u + self.control_c


def _density_weight(disc: Discretization, n: int):
    return disc.tau * np.exp(disc.params.nu * disc.times[n]) * disc.mask * disc.geom.area


def _barrier(disc: Discretization, x):
    """ln of the mollified barrier at each agent and its gradient."""
    vals, grads = [], []
    for i, xi in enumerate(np.asarray(x).reshape(-1, 2)):
        m, g = disc.mollifier.eval_nodes(disc.xi, xi)
        if not m > 0:
            raise ValueError(f"agent {i} at {xi.tolist()} left the admissible region (barrier {m:.3g})")
        vals.append(np.log(m))
        grads.append(g / m)
    return np.array(vals), np.array(grads).reshape(-1, 2)


def objective_terms(disc: Discretization, traj: StateTrajectory, q: ControlGrid) -> ObjectiveTerms:
    p = disc.params
    dens = sum(float(_density_weight(disc, n) @ traj.rho[n]) for n in range(1, disc.N + 1))
    bar = 0.0
    if p.mu > 0 and q.n_agents:
        for n in range(1, disc.N + 1):
            bar -= p.mu * disc.tau * float(np.sum(_barrier(disc, traj.x[n])[0]))
    cu = p.alpha1 / (2.0 * disc.T) * h1_inner(q.u, q.u, q.tau)
    cc = p.alpha2 / (2.0 * disc.T) * h1_inner(q.c, q.c, q.tau)
    return ObjectiveTerms(dens, bar, cu, cc)


def objective_eval(disc: Discretization, traj: StateTrajectory, q: ControlGrid) -> float:
    """Discrete objective J for a trajectory computed from controls ``q``."""
    return objective_terms(disc, traj, q).total


def _state_partials(disc, traj, n):
    """dJ/drho^n and dJ/dx^n (zero for n = 0)."""
    M = traj.x.shape[1]
    if n == 0:
        return np.zeros(disc.mesh.n_triangles), np.zeros((M, 2))
    gx = np.zeros((M, 2))
    if disc.params.mu > 0 and M:
        gx = -disc.params.mu * disc.tau * _barrier(disc, traj.x[n])[1]
    return _density_weight(disc, n), gx


# --------------------------------------------------------------------------
# per-step linearization

class StepLinearization:
    """Exact linearization of forward step ``n`` at a stored trajectory."""

    def __init__(self, disc: Discretization, traj: StateTrajectory, q: ControlGrid, n: int,
                 mutation: Optional[str] = None):
        if mutation not in MUTATIONS:
            raise ValueError(f"unknown mutation {mutation!r}")
        self.disc, self.n, self.mutation = disc, n, mutation
        p = disc.params
        self.rho, self.phi = traj.rho[n], traj.phi[n]
        self.x, self.c = traj.x[n], q.c[n]
        self.rho_next, self.x_next, self.u_next = traj.rho[n + 1], traj.x[n + 1], q.u[n + 1]
        self.bf = beta_cellwise(disc.mesh, disc.geom, self.rho, self.phi, self.x, self.c, p)
        self.B = assemble_advection(disc.mesh, disc.geom, self.bf.beta, p.eta)
        self.J_lu = Factorized(disc.eikonal_jacobian(self.phi))
        self.R_rho = disc.eikonal_rho_jacobian(self.rho)
        self.drho_beta = self.bf.d_rho()
        self.dg_beta = self.bf.d_g()

        scale = disc.tau * p.v0
        self.agents = []
        for i in range(len(self.x_next)):
            m, gm, cells, w = disc.mollifier.eval_cells(self.rho_next, self.x_next[i])
            fm, fpm = f_eval(m)
            a = scale * fpm
            Jc = np.eye(2) - a * np.outer(self.u_next[i], gm)
            self.agents.append((cells, w, a, scale * fm, Jc))

    def _gdir(self, dphi, dx, dc):
        dg = p1_gradient(self.disc.geom, self.disc.mesh.triangles, dphi)
        if len(self.c):
            dg = dg + np.einsum("tmd,m->td", self.bf.kgrad, dc)
            dg = dg - np.einsum("tmde,me,m->td", self.bf.khess, dx, self.c)
        return dg

    def jvp(self, drho, dx, dc, du):
        """Tangent of (rho^{n+1}, x^{n+1}) for perturbations of the step inputs."""
        d = self.disc
        dphi = np.zeros(d.mesh.n_vertices)
        dphi[d.free] = -self.J_lu.solve(self.R_rho @ drho)
        dg = self._gdir(dphi, dx, dc)
        dbeta = self.drho_beta * drho[:, None] + np.einsum("tij,tj->ti", self.dg_beta, dg)
        C = assemble_advection(d.mesh, d.geom, dbeta, 0.0)
        rhs = d.mass_diag * drho - d.tau * (self.B @ drho) - d.tau * (C @ self.rho)
        drho_next = d.S_lu.solve(rhs)
        dx_next = np.empty_like(dx)
        for i, (cells, w, a, b, Jc) in enumerate(self.agents):
            r = dx[i] + a * float(w @ drho_next[cells]) * self.u_next[i] + b * du[i]
            dx_next[i] = np.linalg.solve(Jc, r)
        return drho_next, dx_next

    def vjp(self, rho_bar, x_bar):
        """Transpose of :meth:`jvp`.

        Returns cotangents of ``(rho^n, x^n, c^n, u^{n+1})`` and the step
        multipliers ``(lam_rho^{n+1}, lam_phi^n, lam_x^{n+1})``.
        """
        d, mesh = self.disc, self.disc.mesh
        rho_bar = np.array(rho_bar, dtype=float)
        lam_x = np.empty_like(x_bar)
        u_bar = np.empty_like(x_bar)
        for i, (cells, w, a, b, Jc) in enumerate(self.agents):
            ell = np.linalg.solve(Jc.T, x_bar[i])
            lam_x[i] = ell
            rho_bar[cells] += a * float(self.u_next[i] @ ell) * w
            u_bar[i] = b * ell
        x_out = lam_x.copy()

        lam = d.S_lu.solve(rho_bar, trans=True)
        r_out = d.mass_diag * lam - d.tau * (self.B.T @ lam)

        t1, t2 = mesh.face_cells.T
        jump = 0.5 * mesh.face_lengths * (lam[t2] - lam[t1])
        W = np.zeros((mesh.n_triangles, 2))
        np.add.at(W, t1, (jump * self.rho[t1])[:, None] * mesh.face_normals)
        np.add.at(W, t2, (jump * self.rho[t2])[:, None] * mesh.face_normals)
        beta_bar = -d.tau * W
        if self.mutation == "flip_advection_beta":
            beta_bar = -beta_bar

        r_out += np.sum(beta_bar * self.drho_beta, axis=1)
        g_bar = np.einsum("tij,ti->tj", self.dg_beta, beta_bar)
        phi_bar = np.zeros(mesh.n_vertices)
        np.add.at(phi_bar, mesh.triangles.ravel(),
                  np.einsum("td,tkd->tk", g_bar, d.geom.basis_gradients).ravel())
        if len(self.c):
            c_bar = np.einsum("td,tmd->m", g_bar, self.bf.kgrad)
            x_out -= self.c[:, None] * np.einsum("tmde,td->me", self.bf.khess, g_bar)
        else:
            c_bar = np.zeros(0)

        lam_phi = np.zeros(mesh.n_vertices)
        lam_phi[d.free] = self.J_lu.solve(phi_bar[d.free], trans=True)
        r_out -= self.R_rho.T @ lam_phi[d.free]
        return (r_out, x_out, c_bar, u_bar), (lam, lam_phi, lam_x)


# --------------------------------------------------------------------------
# sweeps

@dataclass
class AdjointTrajectory:
    """Multipliers and the Euclidean control partials ``g_u``, ``g_c`` of the state-dependent objective part."""

    lam_rho: np.ndarray   # (N+1, nt)
    lam_phi: np.ndarray   # (N, nv)
    lam_x: np.ndarray     # (N+1, M, 2)
    g_u: np.ndarray       # (N+1, M, 2)
    g_c: np.ndarray       # (N+1, M)


def tangent_sweep(disc: Discretization, traj: StateTrajectory, q: ControlGrid, dq: ControlGrid) -> float:
    """Directional derivative of the reduced objective in direction ``dq``."""
    p = disc.params
    M = q.n_agents
    drho = np.zeros(disc.mesh.n_triangles)
    dx = np.zeros((M, 2))
    dJ = p.alpha1 / disc.T * h1_inner(q.u, dq.u, q.tau) + p.alpha2 / disc.T * h1_inner(q.c, dq.c, q.tau)
    for n in range(disc.N):
        lin = StepLinearization(disc, traj, q, n)
        drho, dx = lin.jvp(drho, dx, dq.c[n], dq.u[n + 1])
        gr, gx = _state_partials(disc, traj, n + 1)
        dJ += float(gr @ drho) + float(np.sum(gx * dx))
    return dJ


def backward_sweep(disc: Discretization, traj: StateTrajectory, q: ControlGrid,
                   mutation: Optional[str] = None) -> AdjointTrajectory:
    """Reverse sweep over the stored trajectory."""
    N, M = disc.N, q.n_agents
    nt, nv = disc.mesh.n_triangles, disc.mesh.n_vertices
    lam_rho = np.zeros((N + 1, nt))
    lam_phi = np.zeros((N, nv))
    lam_x = np.zeros((N + 1, M, 2))
    g_u = np.zeros((N + 1, M, 2))
    g_c = np.zeros((N + 1, M))
    rho_bar, x_bar = _state_partials(disc, traj, N)
    for n in range(N - 1, -1, -1):
        lin = StepLinearization(disc, traj, q, n, mutation=mutation)
        (rho_bar, x_bar, c_bar, u_bar), (lr, lp, lx) = lin.vjp(rho_bar, x_bar)
        lam_rho[n + 1], lam_phi[n], lam_x[n + 1] = lr, lp, lx
        g_c[n] = c_bar
        g_u[n + 1] = u_bar
        gr, gx = _state_partials(disc, traj, n)
        rho_bar = rho_bar + gr
        x_bar = x_bar + gx
    lam_rho[0] = rho_bar / disc.mass_diag
    lam_x[0] = x_bar
    return AdjointTrajectory(lam_rho, lam_phi, lam_x, g_u, g_c)


@dataclass
class GradientRep:
    """H^1,tau gradient ``grad`` with representers ``z`` (of g_u) and ``d`` (of g_c)."""

    z: np.ndarray
    d: np.ndarray
    grad: ControlGrid
    euclidean: ControlGrid


def gradient(disc: Discretization, adj: AdjointTrajectory, q: ControlGrid) -> GradientRep:
    """Riesz representation of the reduced gradient in the H^1(0,T),tau metric."""
    p = disc.params
    n_nodes = q.N + 1
    H = h1_matrix(n_nodes, q.tau)
    lu = Factorized(H)
    M = q.n_agents
    z = lu.solve(adj.g_u.reshape(n_nodes, -1)).reshape(adj.g_u.shape) if M else np.zeros_like(q.u)
    dd = lu.solve(adj.g_c.reshape(n_nodes, -1)).reshape(adj.g_c.shape) if M else np.zeros_like(q.c)
    grad = ControlGrid(p.alpha1 / disc.T * q.u + z, p.alpha2 / disc.T * q.c + dd, q.T)
    eu = adj.g_u + p.alpha1 / disc.T * (H @ q.u.reshape(n_nodes, -1)).reshape(q.u.shape)
    ec = adj.g_c + p.alpha2 / disc.T * (H @ q.c.reshape(n_nodes, -1)).reshape(q.c.shape)
    return GradientRep(z=z, d=dd, grad=grad, euclidean=ControlGrid(eu, ec, q.T))


# --------------------------------------------------------------------------
# reduced problem

class ReducedProblem:
    """Reduced objective q -> J(S(q), q) with its H^1,tau gradient.

    The most recent state solve is cached, so ``value`` followed by
    ``gradient`` at the same controls runs the forward sweep once.
    """

    def __init__(self, disc: Discretization, rho0, x0, mutation: Optional[str] = None):
        self.disc = disc
        self.rho0 = np.asarray(rho0, dtype=float)
        self.x0 = np.asarray(x0, dtype=float).reshape(-1, 2)
        self.mutation = mutation
        self._key = None
        self._traj = None
        self.n_forward = 0
        self.n_adjoint = 0

    @staticmethod
    def _hash(q):
        return (q.u.tobytes(), q.c.tobytes())

    def state(self, q: ControlGrid) -> StateTrajectory:
        key = self._hash(q)
        if key != self._key:
            self._traj = forward_sweep(self.disc, q, self.rho0, self.x0)
            self._key = key
            self.n_forward += 1
        return self._traj

    def value(self, q: ControlGrid) -> float:
        return objective_eval(self.disc, self.state(q), q)

    def gradient(self, q: ControlGrid) -> GradientRep:
        traj = self.state(q)
        adj = backward_sweep(self.disc, traj, q, mutation=self.mutation)
        self.n_adjoint += 1
        return gradient(self.disc, adj, q)

    def directional_derivative(self, q: ControlGrid, dq: ControlGrid) -> float:
        return tangent_sweep(self.disc, self.state(q), q, dq)
