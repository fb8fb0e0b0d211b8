"""Pointwise model ingredients: velocity rule, smoothed unit-ball projection,
agent kernels, the cellwise transport direction and the wall barrier."""

import logging
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
import scipy.sparse as sp

from .linalg import assemble, solve
from .mesh import GeometryCache, TriMesh

logger = logging.getLogger(__name__)

RHO_MAX = 1.0


# --------------------------------------------------------------------------
# kernels

@dataclass(frozen=True)
class BumpKernel:
    """k(r) = exp(-R^2 / (R^2 - r^2)) for r < R, zero otherwise."""

    R: float = 2.0

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("bump radius R must be positive")

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        R2 = self.R ** 2
        inside = r < self.R
        q = np.where(inside, R2 - r * r, 1.0)
        k = np.where(inside, np.exp(-R2 / q), 0.0)
        g = -2.0 * R2 / q ** 2                      # k'(r) = k * g * r
        dk = k * g * r
        dgr = -2.0 * R2 * (R2 + 3.0 * r * r) / q ** 3   # d(g r)/dr
        ddk = k * ((g * r) ** 2 + dgr)
        # k'(r)/r, finite at the origin
        dk_over_r = k * g
        return k, dk, ddk, dk_over_r


@dataclass(frozen=True)
class MorseKernel:
    """k(r) = exp(-2a(r - r_a)) - 2 exp(-a(r - r_a))."""

    a: float = 1.5
    r_a: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.r_a > 0):
            raise ValueError("Morse parameters a and r_a must be positive")

    def radial(self, r):
        r = np.asarray(r, dtype=float)
        e1 = np.exp(-self.a * (r - self.r_a))
        e2 = e1 * e1
        k = e2 - 2.0 * e1
        dk = 2.0 * self.a * (e1 - e2)
        ddk = self.a ** 2 * (4.0 * e2 - 2.0 * e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dk_over_r = np.where(r > 0, dk / np.where(r > 0, r, 1.0), 0.0)
        return k, dk, ddk, dk_over_r


Kernel = Union[BumpKernel, MorseKernel]


def kernel_eval(kernel: Kernel, x, hessian=False):
    """K(x) = k(|x|) with gradient (and Hessian) for points x of shape (..., 2).

    At the origin the gradient is set to zero and the Hessian to k''(0) I,
    which is exact for the bump and a one-sided convention for Morse.
    """
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum(x * x, axis=-1))
    k, dk, ddk, dk_over_r = kernel.radial(r)
    grad = dk_over_r[..., None] * x
    if not hessian:
        return k, grad
    safe = np.where(r > 0, r, 1.0)
    e = x / safe[..., None]
    outer = e[..., :, None] * e[..., None, :]
    eye = np.eye(2)
    hess = ddk[..., None, None] * outer + dk_over_r[..., None, None] * (eye - outer)
    at0 = r == 0
    if np.any(at0):
        hess = np.where(at0[..., None, None], ddk[..., None, None] * eye, hess)
    return k, grad, hess


def agent_potential(kernel: Kernel, x, positions, intensities):
    """Agent potential sum_i c_i K(x - x_i) at points ``x`` (n, 2).

    Returns ``(phi_K, grad_x, d_dpositions, d_dintensities)`` with shapes
    (n,), (n, 2), (n, M, 2) and (n, M).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    c = np.asarray(intensities, dtype=float).reshape(-1)
    n, M = len(x), len(positions)
    if M == 0:
        return np.zeros(n), np.zeros((n, 2)), np.zeros((n, 0, 2)), np.zeros((n, 0))
    K, gK = kernel_eval(kernel, x[:, None, :] - positions[None, :, :])
    phi = K @ c
    grad = np.einsum("nmd,m->nd", gK, c)
    return phi, grad, -c[None, :, None] * gK, K


# --------------------------------------------------------------------------
# velocity rule and smoothed projection

def _smoothstep(t):
    """Quintic 6t^5 - 15t^4 + 10t^3 on [0, 1] and its derivative."""
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10.0 - 15.0 * t + 6.0 * t * t), 30.0 * t * t * (1.0 - t) ** 2


def cutoff(rho):
    """Cut-off equal to one on [0, 1], zero outside (-1, 2), quintic blends in between."""
    rho = np.asarray(rho, dtype=float)
    left, dleft = _smoothstep(rho + 1.0)
    right, dright = _smoothstep(2.0 - rho)
    val = np.where(rho < 0.0, left, np.where(rho > 1.0, right, 1.0))
    der = np.where(rho < 0.0, dleft, np.where(rho > 1.0, -dright, 0.0))
    return val, der


def f_eval(rho):
    """Density-velocity rule f(rho) = (1 - rho) * cutoff(rho) and f'(rho)."""
    rho = np.asarray(rho, dtype=float)
    xi, dxi = cutoff(rho)
    return (1.0 - rho) * xi, -xi + (1.0 - rho) * dxi


def _soft_excess(s, w):
    """C^2 quartic smoothing of max(0, s) on [-w, w]; returns value and derivative."""
    a = 3.0 / (4.0 * w ** 3)
    sc = np.clip(s, -w, w)
    p = a * (w * w * (sc + w) ** 2 / 2.0 - (sc ** 4 / 4.0 + w ** 3 * sc) / 3.0 - w ** 4 / 4.0)
    dp = a * (w * w * (sc + w) - (sc ** 3 + w ** 3) / 3.0)
    p = np.where(s >= w, s, p)
    dp = np.where(s >= w, 1.0, dp)
    return p, dp


def smooth_min1(r, width):
    """C^2 smoothed min{1, r} and its derivative; exact outside [1-width, 1+width]."""
    p, dp = _soft_excess(np.asarray(r, dtype=float) - 1.0, width)
    return r - p, 1.0 - dp


def h_eval(v, width=1e-2):
    """Smoothed projection onto the closed unit ball and its Jacobian.

    ``v`` has shape (..., 2); returns h (..., 2) and Dh (..., 2, 2).
    """
    v = np.asarray(v, dtype=float)
    r = np.sqrt(np.sum(v * v, axis=-1))
    m, dm = smooth_min1(r, width)
    inner = r <= 1.0 - width
    safe = np.where(inner, 1.0, r)
    g = np.where(inner, 1.0, m / safe)
    dg_over_r = np.where(inner, 0.0, (dm * safe - m) / safe ** 3)
    hv = g[..., None] * v
    eye = np.eye(2)
    Dh = g[..., None, None] * eye + dg_over_r[..., None, None] * (v[..., :, None] * v[..., None, :])
    return hv, Dh


# --------------------------------------------------------------------------
# parameters

@dataclass(frozen=True)
class ModelParams:
    """Scalar model constants; ``rho_max`` is fixed to one.

    ``h_smooth`` is the smoothing width of the min in the unit-ball
    projection; ``delta3`` is accepted as an alias for it.
    """

    eps: float = 1e-5
    delta1: float = 0.2
    delta2: float = 0.1
    delta4: float = 0.1
    gamma: float = 10.0
    v0: float = 1.0
    nu: float = 1.0
    mu: float = 5e-2
    alpha1: float = 5e-2
    alpha2: float = 5e-2
    zeta: float = 1e-2
    eta: float = 1.0
    h_smooth: float = 1e-2
    kernel: Kernel = field(default_factory=MorseKernel)

    def __post_init__(self):
        for name in ("delta1", "delta2", "delta4", "zeta", "h_smooth", "v0", "alpha1", "alpha2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("eps", "gamma", "mu", "eta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.h_smooth < 1:
            raise ValueError("h_smooth must be below one")
        if not np.isfinite(self.nu):
            raise ValueError("nu must be finite")

    @property
    def rho_max(self):
        return RHO_MAX

    @property
    def delta3(self):
        return self.h_smooth

    def replace(self, **changes):
        if "delta3" in changes:
            changes["h_smooth"] = changes.pop("delta3")
        return replace(self, **changes)


# --------------------------------------------------------------------------
# transport direction

@dataclass
class BetaField:
    """Cellwise transport direction with everything needed to differentiate it."""

    beta: np.ndarray        # (nt, 2)
    f: np.ndarray           # (nt,)
    fprime: np.ndarray      # (nt,)
    g: np.ndarray           # (nt, 2) argument of h
    h: np.ndarray           # (nt, 2)
    Dh: np.ndarray          # (nt, 2, 2)
    kgrad: np.ndarray       # (nt, M, 2) grad K(centroid - x_i)
    khess: np.ndarray       # (nt, M, 2, 2) Hessian K(centroid - x_i)
    intensities: np.ndarray  # (M,)
    v0: float

    def d_rho(self):
        """d beta_T / d rho_T, shape (nt, 2)."""
        return self.v0 * self.fprime[:, None] * self.h

    def d_g(self):
        """d beta_T / d g_T, shape (nt, 2, 2)."""
        return self.v0 * self.f[:, None, None] * self.Dh


def p1_gradient(geom: GeometryCache, triangles, phi):
    """Cellwise constant gradient of a P1 field, shape (nt, 2)."""
    return np.einsum("tk,tkd->td", np.asarray(phi)[triangles], geom.basis_gradients)


def beta_cellwise(mesh: TriMesh, geom: GeometryCache, rho, phi, positions, intensities,
                  params: ModelParams) -> BetaField:
    """beta_T = v0 f(rho_T) h(grad phi|_T + grad phi_K(centroid_T))."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    c = np.asarray(intensities, dtype=float).reshape(-1)
    fv, fp = f_eval(rho)
    g = p1_gradient(geom, mesh.triangles, phi)
    nt, M = len(fv), len(positions)
    if M:
        _, kg, kh = kernel_eval(params.kernel, geom.centroid[:, None, :] - positions[None], hessian=True)
        g = g + np.einsum("tmd,m->td", kg, c)
    else:
        kg, kh = np.zeros((nt, 0, 2)), np.zeros((nt, 0, 2, 2))
    hv, Dh = h_eval(g, params.h_smooth)
    beta = params.v0 * fv[:, None] * hv
    return BetaField(beta=beta, f=fv, fprime=fp, g=g, h=hv, Dh=Dh, kgrad=kg, khess=kh,
                     intensities=c, v0=params.v0)


# --------------------------------------------------------------------------
# barrier

def p1_stiffness(mesh: TriMesh, geom: GeometryCache):
    G = geom.basis_gradients
    local = geom.area[:, None, None] * np.einsum("tad,tbd->tab", G, G)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return assemble((rows, cols, local.ravel()), (mesh.n_vertices, mesh.n_vertices))


def lumped_mass(mesh: TriMesh, geom: GeometryCache):
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(geom.area / 3.0, 3),
                       minlength=mesh.n_vertices)


def solve_barrier(mesh: TriMesh, geom: GeometryCache, delta4: float) -> np.ndarray:
    """P1 solution of -delta4 Lap xi + xi = 1 with xi = 0 on the whole boundary.

    The mass term is lumped so that the discrete maximum principle holds on
    non-obtuse meshes.
    """
    if not delta4 > 0:
        raise ValueError("delta4 must be positive")
    K = p1_stiffness(mesh, geom)
    m = lumped_mass(mesh, geom)
    free = ~mesh.boundary_vertices
    A = (delta4 * K + sp.diags(m)).tocsr()[free][:, free]
    xi = np.zeros(mesh.n_vertices)
    xi[free] = solve(A, m[free])
    if xi.min() < -1e-12 or xi.max() >= 1.0:
        logger.warning("barrier function outside [0, 1): [%.3g, %.3g]", xi.min(), xi.max())
    return xi
