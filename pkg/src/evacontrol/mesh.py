"""Triangular meshes with exit/wall boundary tags and the geometry used by
the finite volume and P1 finite element discretizations."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

WALL = 0
EXIT = 1
TAG_NAMES = {WALL: "wall", EXIT: "exit"}
SIDES = ("south", "east", "north", "west")


class MeshError(ValueError):
    """Raised for invalid or degenerate meshes and room descriptions."""


class TriMesh:
    """Conforming triangular mesh with tagged boundary edges.

    Parameters
    ----------
    vertices : (nv, 2) array
    triangles : (nt, 3) int array
        Clockwise triangles are reoriented.
    boundary_edges : (nb, 2) int array
        Every topological boundary edge exactly once.
    boundary_tags : (nb,) int array
        ``EXIT`` or ``WALL`` per boundary edge.
    """

    def __init__(self, vertices, triangles, boundary_edges, boundary_tags):
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) == 0:
            raise MeshError("mesh has no triangles")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("triangle vertex index out of range")
        if not np.all(np.isfinite(vertices)):
            raise MeshError("non-finite vertex coordinates")

        p = vertices[triangles]
        signed = 0.5 * _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        flat = np.flatnonzero(np.abs(signed) <= 1e-14 * max(1.0, np.abs(signed).max()))
        if flat.size:
            raise MeshError(f"triangles with zero area: {flat[:10].tolist()}")
        cw = signed < 0
        if cw.any():
            triangles = triangles.copy()
            triangles[cw] = triangles[cw][:, [0, 2, 1]]

        self.vertices = vertices
        self.triangles = triangles
        self.vertices.flags.writeable = False
        self.triangles.flags.writeable = False
        self._build_topology(np.asarray(boundary_edges, dtype=np.int64).reshape(-1, 2),
                             np.asarray(boundary_tags, dtype=np.int64).reshape(-1))

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def _build_topology(self, boundary_edges, boundary_tags):
        tri = self.triangles
        # local edge k joins vertices k and k+1 (counterclockwise)
        local = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1)
        directed = local.reshape(-1, 2)
        key = np.sort(directed, axis=1)
        uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            bad = uniq[counts > 2][:5].tolist()
            raise MeshError(f"non-conforming mesh: edges shared by more than two triangles {bad}")

        owner = np.repeat(np.arange(len(tri)), 3)
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        first = order[starts]

        interior = np.flatnonzero(counts == 2)
        second = order[starts[interior] + 1]
        first_int = first[interior]
        self.face_cells = np.stack([owner[first_int], owner[second]], axis=1)
        self.face_vertices = directed[first_int]
        d = self.vertices[self.face_vertices[:, 1]] - self.vertices[self.face_vertices[:, 0]]
        self.face_lengths = np.hypot(d[:, 0], d[:, 1])
        # outward normal of the first cell: right-hand normal of its ccw edge
        self.face_normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / self.face_lengths[:, None]

        bnd = np.flatnonzero(counts == 1)
        bfirst = first[bnd]
        self.bface_cells = owner[bfirst]
        self.bface_vertices = directed[bfirst]
        d = self.vertices[self.bface_vertices[:, 1]] - self.vertices[self.bface_vertices[:, 0]]
        self.bface_lengths = np.hypot(d[:, 0], d[:, 1])
        self.bface_normals = np.stack([d[:, 1], -d[:, 0]], axis=1) / self.bface_lengths[:, None]

        if boundary_edges.shape[0] != boundary_tags.shape[0]:
            raise MeshError("boundary edge and tag counts differ")
        if not np.all(np.isin(boundary_tags, (WALL, EXIT))):
            raise MeshError("boundary tags must be exit or wall")
        given = np.sort(boundary_edges, axis=1)
        g_uniq, g_counts = np.unique(given, axis=0, return_counts=True)
        if np.any(g_counts > 1):
            raise MeshError(f"boundary edge tagged more than once: {g_uniq[g_counts > 1][0].tolist()}")
        topo = uniq[bnd]
        if len(given) != len(topo):
            raise MeshError(f"{len(topo)} boundary edges in mesh but {len(given)} tagged")
        # match tagged edges to topological boundary edges
        nv = self.n_vertices
        topo_code = topo[:, 0] * nv + topo[:, 1]
        given_code = given[:, 0] * nv + given[:, 1]
        pos = np.searchsorted(topo_code, given_code)
        pos = np.clip(pos, 0, len(topo_code) - 1)
        if not np.array_equal(topo_code[pos], given_code):
            missing = given[topo_code[pos] != given_code][0].tolist()
            raise MeshError(f"tagged edge {missing} is not a boundary edge")
        tags = np.empty(len(topo), dtype=np.int64)
        tags[pos] = boundary_tags
        self.bface_tags = tags

        self.dirichlet = np.zeros(nv, dtype=bool)
        self.dirichlet[self.bface_vertices[tags == EXIT].reshape(-1)] = True
        self.boundary_vertices = np.zeros(nv, dtype=bool)
        self.boundary_vertices[self.bface_vertices.reshape(-1)] = True
        for name in ("face_cells", "face_vertices", "face_lengths", "face_normals",
                     "bface_cells", "bface_vertices", "bface_lengths", "bface_normals",
                     "bface_tags", "dirichlet", "boundary_vertices"):
            getattr(self, name).flags.writeable = False

    def area(self):
        p = self.vertices[self.triangles]
        return float(0.5 * np.sum(_cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])))

    def __repr__(self):
        n_exit = int(np.sum(self.bface_tags == EXIT))
        return (f"TriMesh(vertices={self.n_vertices}, triangles={self.n_triangles}, "
                f"exit_faces={n_exit}, wall_faces={len(self.bface_tags) - n_exit})")


@dataclass(frozen=True)
class GeometryCache:
    """Per-cell and per-face geometric quantities of a :class:`TriMesh`."""

    area: np.ndarray
    diameter: np.ndarray
    inradius: np.ndarray
    circumcenter: np.ndarray
    centroid: np.ndarray
    transmissibility: np.ndarray
    basis_gradients: np.ndarray  # (nt, 3, 2) gradients of the P1 hat functions
    kappa: float
    h: float

    @property
    def h_min(self):
        return float(self.diameter.min())


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def circumcenters(points):
    """Circumcenters of triangles given as a (n, 3, 2) array."""
    a, b, c = points[:, 0], points[:, 1], points[:, 2]
    ba, ca = b - a, c - a
    d = 2.0 * _cross(ba, ca)
    bb = np.sum(ba * ba, axis=1)
    cc = np.sum(ca * ca, axis=1)
    ux = (ca[:, 1] * bb - ba[:, 1] * cc) / d
    uy = (ba[:, 0] * cc - ca[:, 0] * bb) / d
    return a + np.stack([ux, uy], axis=1)


def compute_geometry(mesh: TriMesh) -> GeometryCache:
    """Areas, diameters, inradii, circumcenters and two-point transmissibilities.

    Raises
    ------
    MeshError
        If two neighbouring cells have (numerically) coincident circumcenters.
    """
    p = mesh.vertices[mesh.triangles]
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    lengths = np.stack([np.hypot(*e0.T), np.hypot(*e1.T), np.hypot(*e2.T)], axis=1)
    area = 0.5 * _cross(e2, -e1)
    diameter = lengths.max(axis=1)
    inradius = 2.0 * area / lengths.sum(axis=1)
    cc = circumcenters(p)
    centroid = p.mean(axis=1)

    h = float(diameter.max())
    dist = np.linalg.norm(cc[mesh.face_cells[:, 0]] - cc[mesh.face_cells[:, 1]], axis=1)
    bad = np.flatnonzero(dist < 1e-12 * h)
    if bad.size:
        f = int(bad[0])
        raise MeshError(
            f"coincident circumcenters across interior face {f} "
            f"(vertices {mesh.face_vertices[f].tolist()}, cells {mesh.face_cells[f].tolist()}); "
            "a Delaunay-quality mesh without cocircular neighbours is required")
    tau_f = 1.0 / dist

    # grad of hat function k is the inward edge normal of the opposite edge / (2|T|)
    grads = np.empty((len(p), 3, 2))
    for k, e in enumerate((e0, e1, e2)):
        grads[:, k, 0] = -e[:, 1]
        grads[:, k, 1] = e[:, 0]
    grads /= (2.0 * area)[:, None, None]

    for arr in (area, diameter, inradius, cc, centroid, tau_f, grads):
        arr.flags.writeable = False
    return GeometryCache(area=area, diameter=diameter, inradius=inradius, circumcenter=cc,
                         centroid=centroid, transmissibility=tau_f, basis_gradients=grads,
                         kappa=float(np.max(diameter / inradius)), h=h)


def cfl_max_tau(geom: GeometryCache) -> float:
    """Largest time step for which the transport scheme stays in [0, 1]."""
    if geom.diameter.size == 0:
        raise MeshError("empty mesh")
    return float(np.pi / (3.0 * geom.kappa ** 2) * geom.diameter.min())


# --------------------------------------------------------------------------
# room generation

@dataclass(frozen=True)
class Exit:
    side: str
    start: float
    end: float


@dataclass(frozen=True)
class RoomSpec:
    """Axis-aligned rectangle ``[0, width] x [0, height]`` with exits on its
    sides and rectangular wall blocks ``(x0, y0, x1, y1)`` cut out of it."""

    width: float
    height: float
    target_length: float
    exits: Sequence[Exit] = ()
    walls: Sequence[tuple] = field(default_factory=tuple)


def _side_length(spec, side):
    return spec.width if side in ("south", "north") else spec.height


def _validate_room(spec: RoomSpec):
    if not (spec.width > 0 and spec.height > 0):
        raise MeshError(f"room must have positive extents, got {spec.width} x {spec.height}")
    if not spec.target_length > 0:
        raise MeshError("target edge length must be positive")
    by_side = {}
    for ex in spec.exits:
        if ex.side not in SIDES:
            raise MeshError(f"unknown side {ex.side!r}; expected one of {SIDES}")
        length = _side_length(spec, ex.side)
        if not (0.0 <= ex.start < ex.end <= length):
            raise MeshError(
                f"exit [{ex.start}, {ex.end}] on {ex.side} side lies outside the boundary [0, {length}]")
        by_side.setdefault(ex.side, []).append(ex)
    for side, exits in by_side.items():
        exits = sorted(exits, key=lambda e: e.start)
        for a, b in zip(exits, exits[1:]):
            if b.start < a.end:
                raise MeshError(f"overlapping exits on {side} side: [{a.start}, {a.end}] and [{b.start}, {b.end}]")
    for w in spec.walls:
        x0, y0, x1, y1 = w
        if not (x1 > x0 and y1 > y0):
            raise MeshError(f"wall block {w} has non-positive extent")


def _lattice(width, height, target):
    """Row-staggered triangular lattice filling the rectangle exactly."""
    nx = max(1, int(round(width / target)))
    ny = max(2, int(round(height / (target * np.sqrt(3.0) / 2.0))))
    dx, dy = width / nx, height / ny
    rows, pts = [], []
    count = 0
    for j in range(ny + 1):
        if j % 2 == 0:
            xs = np.arange(nx + 1) * dx
        else:
            xs = np.concatenate([[0.0], (np.arange(nx) + 0.5) * dx, [width]])
        xs[-1] = width
        rows.append(np.arange(count, count + len(xs)))
        pts.append(np.stack([xs, np.full(len(xs), j * dy)], axis=1))
        count += len(xs)
    pts = np.concatenate(pts)
    pts[-len(rows[-1]):, 1] = height

    tris = []
    for j in range(ny):
        lo, hi = rows[j], rows[j + 1]
        if j % 2 == 0:
            E, O = lo, hi
            for i in range(nx):
                tris.append((E[i], E[i + 1], O[i + 1]))
            for i in range(nx + 1):
                tris.append((E[i], O[i + 1], O[i]))
        else:
            O, E = lo, hi
            for i in range(nx):
                tris.append((O[i + 1], E[i + 1], E[i]))
            for i in range(nx + 1):
                tris.append((O[i], O[i + 1], E[i]))
    return pts, np.array(tris, dtype=np.int64)


def _boundary_edges(triangles):
    local = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    key = np.sort(local, axis=1)
    uniq, counts = np.unique(key, axis=0, return_counts=True)
    return uniq[counts == 1]


def generate_room(spec: RoomSpec) -> TriMesh:
    """Mesh a rectangular room; boundary edges whose midpoints fall inside an
    exit interval are tagged exit, all others (including wall blocks) wall."""
    _validate_room(spec)
    pts, tris = _lattice(spec.width, spec.height, spec.target_length)

    if spec.walls:
        cen = pts[tris].mean(axis=1)
        keep = np.ones(len(tris), dtype=bool)
        for x0, y0, x1, y1 in spec.walls:
            keep &= ~((cen[:, 0] > x0) & (cen[:, 0] < x1) & (cen[:, 1] > y0) & (cen[:, 1] < y1))
        tris = tris[keep]
        if len(tris) == 0:
            raise MeshError("wall blocks cover the whole room")
        used = np.unique(tris)
        remap = -np.ones(len(pts), dtype=np.int64)
        remap[used] = np.arange(len(used))
        pts, tris = pts[used], remap[tris]

    edges = _boundary_edges(tris)
    mid = pts[edges].mean(axis=1)
    tol = 1e-9 * max(spec.width, spec.height)
    tags = np.full(len(edges), WALL, dtype=np.int64)
    on_side = {
        "south": (np.abs(mid[:, 1]) < tol, mid[:, 0]),
        "north": (np.abs(mid[:, 1] - spec.height) < tol, mid[:, 0]),
        "west": (np.abs(mid[:, 0]) < tol, mid[:, 1]),
        "east": (np.abs(mid[:, 0] - spec.width) < tol, mid[:, 1]),
    }
    for ex in spec.exits:
        on, s = on_side[ex.side]
        hit = on & (s >= ex.start) & (s <= ex.end)
        if not hit.any():
            raise MeshError(f"exit [{ex.start}, {ex.end}] on {ex.side} side is narrower than one "
                            f"boundary edge at target length {spec.target_length}")
        tags[hit] = EXIT
    mesh = TriMesh(pts, tris, edges, tags)
    compute_geometry(mesh)
    return mesh


# --------------------------------------------------------------------------
# quadrature

def _gauss_legendre01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_rule(n: int, level: int = 0):
    """Collapsed Gauss-Legendre rule on the reference triangle.

    Exact for polynomials of degree ``2n - 2``; ``level`` applies that many
    uniform 1:4 subdivisions first. Returns barycentric points (nq, 3) and
    weights (nq,) summing to one.
    """
    x, w = _gauss_legendre01(n)
    s, t = np.meshgrid(x, x, indexing="ij")
    ws = np.outer(w, w) * (1.0 - s)
    xi = s.ravel()
    et = (t * (1.0 - s)).ravel()
    bary = np.stack([1.0 - xi - et, xi, et], axis=1)
    weights = 2.0 * ws.ravel()

    subs = [np.eye(3)]
    for _ in range(level):
        nxt = []
        for c in subs:
            m01, m12, m20 = (c[0] + c[1]) / 2, (c[1] + c[2]) / 2, (c[2] + c[0]) / 2
            nxt += [np.stack([c[0], m01, m20]), np.stack([m01, c[1], m12]),
                    np.stack([m20, m12, c[2]]), np.stack([m12, m20, m01])]
        subs = nxt
    pts = np.concatenate([bary @ c for c in subs])
    wts = np.tile(weights, len(subs)) / len(subs)
    return pts, wts


def project_p0(mesh: TriMesh, func: Callable, order: int = 8, clamp: bool = True) -> np.ndarray:
    """Cell averages of ``func`` (vectorized over (n, 2) points), clamped into [0, 1]
    with a logged warning unless ``clamp`` is false."""
    bary, w = triangle_rule(order)
    p = mesh.vertices[mesh.triangles]
    pts = np.einsum("qk,tkd->tqd", bary, p)
    vals = np.asarray(func(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    if vals.shape[1] != len(w):
        raise ValueError("density function must return one value per point")
    avg = vals @ w
    lo, hi = avg.min(), avg.max()
    if clamp and (lo < 0.0 or hi > 1.0):
        logger.warning("projected initial density in [%.6g, %.6g]; clamping into [0, 1]", lo, hi)
        avg = np.clip(avg, 0.0, 1.0)
    return avg


class Mollifier:
    """Gaussian-mollified point evaluation of P0 and P1 fields.

    The value at ``x0`` is the ratio of the Gaussian-weighted integral of the
    field to the Gaussian-weighted integral of one, both computed with a
    fixed composite quadrature on every triangle within ``cutoff * sqrt(zeta)``.
    """

    def __init__(self, mesh: TriMesh, geom: GeometryCache, zeta: float, cutoff: float = 8.0,
                 order: int = 2, level: Optional[int] = None):
        if not zeta > 0:
            raise ValueError("mollifier locality zeta must be positive")
        self.mesh = mesh
        self.zeta = float(zeta)
        self.radius = cutoff * np.sqrt(zeta)
        if level is None:
            level = int(np.clip(np.ceil(np.log2(geom.h / np.sqrt(zeta))), 0, 5))
        self.level = level
        self.bary, self.weights = triangle_rule(order, level)
        self.area = geom.area
        self.centroid = geom.centroid
        corners = mesh.vertices[mesh.triangles]
        self._reach = np.max(np.linalg.norm(corners - self.centroid[:, None], axis=2), axis=1)
        self._tree = cKDTree(self.centroid)
        self._max_reach = float(self._reach.max())
        # quadrature points and area-scaled weights for every triangle, (nt, q, 2) and (nt, q)
        self._pts = np.einsum("qk,ckd->cqd", self.bary, corners)
        self._w = self.area[:, None] * self.weights[None, :]
        self._floor = 1e3 * np.finfo(float).tiny ** 0.5

    def _local(self, x0):
        x0 = np.asarray(x0, dtype=float)
        cand = np.asarray(self._tree.query_ball_point(x0, self.radius + self._max_reach), dtype=np.int64)
        if cand.size:
            cand.sort()
            gap = np.linalg.norm(self.centroid[cand] - x0, axis=1) - self._reach[cand]
            cand = cand[gap <= self.radius]
        if cand.size == 0:
            raise ValueError(f"mollified evaluation point {x0.tolist()} is outside the domain")
        diff = self._pts[cand] - x0
        r2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
        wg = np.exp(r2 * (-0.5 / self.zeta)) * ((0.5 / np.pi / self.zeta) * self._w[cand])   # (c, q)
        den = wg.sum()
        if not den > self._floor:
            raise ValueError(f"mollified evaluation point {x0.tolist()} is outside the domain")
        return cand, wg, diff, den

    def eval_cells(self, rho, x0):
        """Mollified value of the P0 field ``rho`` at ``x0``.

        Returns ``(value, grad_x0, cells, weights)`` where ``weights`` are the
        derivatives of the value with respect to ``rho[cells]``.
        """
        cand, wg, diff, den = self._local(x0)
        I = wg.sum(axis=1)
        dI = np.einsum("cq,cqd->cd", wg, diff) / self.zeta      # d I / d x0
        r = np.asarray(rho)[cand]
        value = (I @ r) / den
        grad = (r @ dI - value * dI.sum(axis=0)) / den
        return value, grad, cand, I / den

    def eval_nodes(self, phi, x0):
        """Mollified value and x0-gradient of the P1 field ``phi`` at ``x0``."""
        cand, wg, diff, den = self._local(x0)
        vals = np.asarray(phi)[self.mesh.triangles[cand]] @ self.bary.T   # (c, q)
        value = np.sum(wg * vals) / den
        grad = np.einsum("cq,cqd->d", wg * (vals - value), diff) / (self.zeta * den)
        return value, grad


def mollified_eval(mesh: TriMesh, rho, x0, zeta: float, geom: Optional[GeometryCache] = None):
    """One-off mollified point evaluation of a cell field; returns (value, gradient)."""
    geom = geom if geom is not None else compute_geometry(mesh)
    value, grad, _, _ = Mollifier(mesh, geom, zeta).eval_cells(rho, x0)
    return value, grad
