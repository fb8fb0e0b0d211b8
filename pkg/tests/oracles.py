"""Independent dense oracles shared by the unit and acceptance tests."""

import numpy as np
from scipy.linalg import cholesky
from scipy.optimize import fsolve, lsq_linear
from scipy.spatial import cKDTree

from evacontrol.adjoint import h1_matrix
from evacontrol.mesh import Exit, RoomSpec, generate_room


def eikonal_oracle(vertices, triangles, fixed, rho, delta1, delta2):
    """Dense, independent solve of delta1 K phi + sum_T |T|/3 (|grad phi_T|^2 - s_T) = 0 on free nodes."""
    s = 1.0 / ((1.0 - rho) ** 2 + delta2)
    free = [v for v in range(len(vertices)) if v not in fixed]
    local = []
    for t in triangles:
        P = vertices[t]
        J = np.array([P[1] - P[0], P[2] - P[0]]).T          # reference -> physical
        area = 0.5 * abs(np.linalg.det(J))
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        grads = ref @ np.linalg.inv(J)                         # rows: grad lambda_k
        local.append((t, area, grads))

    def residual(x):
        phi = np.zeros(len(vertices))
        phi[free] = x
        R = np.zeros(len(vertices))
        for (t, area, grads), sT in zip(local, s):
            g = grads.T @ phi[t]
            R[t] += delta1 * area * grads @ g + area / 3.0 * (g @ g - sT)
        return R[free]

    x = fsolve(residual, np.ones(len(free)), xtol=1e-15)
    phi = np.zeros(len(vertices))
    phi[free] = x
    return phi, np.linalg.norm(residual(x))


def metric(n, tau):
    return h1_matrix(n, tau).toarray() / tau


def box_oracle(c, tau):
    """min 1/2 (d - c)^T A (d - c) on [0, 1]: bounded least squares with A = L^T L."""
    L = cholesky(metric(len(c), tau))
    return lsq_linear(L, L @ c, bounds=(0.0, 1.0), method="bvls", tol=1e-15).x


def ball_oracle(u, tau, iters=20000):
    """FISTA with adaptive restart on the dense problem; per-node projection onto the unit disc."""
    A = metric(len(u), tau)
    L = np.linalg.eigvalsh(A).max()

    def proj(w):
        r = np.maximum(1.0, np.linalg.norm(w, axis=1))
        return w / r[:, None]

    w = proj(u.copy())
    y, t = w.copy(), 1.0
    for _ in range(iters):
        w_new = proj(y - A @ (y - u) / L)
        if np.sum((y - w_new) * (w_new - w)) > 0:     # restart
            t, y = 1.0, w.copy()
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = w_new + (t - 1) / t_new * (w_new - w)
        w, t = w_new, t_new
    return w


def mirror_room():
    """6 x 4 room with exits facing each other; returns the mesh and the mirror vertex map."""
    m = generate_room(RoomSpec(6.0, 4.0, 0.5, exits=[Exit("west", 1.5, 2.5), Exit("east", 1.5, 2.5)]))
    mirror = m.vertices * [-1.0, 1.0] + [6.0, 0.0]
    dist, idx = cKDTree(m.vertices).query(mirror)
    assert dist.max() < 1e-12
    return m, idx
