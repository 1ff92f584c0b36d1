"""Independent raytracing of reflector and refractor surfaces.

The tracer only uses the envelope ``u = min_j -phi(., y_j, s_j)`` and its
gradient; hits are compared with the cell assignment of the dual solve.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .measure import AtomicMeasure, SourceGrid, lift
from .transforms import DualPotential, CellDecomposition, decompose, interior_nodes, lattice_gradient

UNIT_TOL = 1e-12


class TraceError(ValueError):
    """The surface cannot be traced (e.g. |Du| >= 1 for a parallel reflector)."""


# -- elementary optics ---------------------------------------------------------------

def _unit_check(v, what):
    norm = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} must be unit vectors (max | |v| - 1 | = {np.max(np.abs(norm - 1)):.2e})")


def reflect(d, normal):
    """Mirror reflection ``d - 2 (d.n) n`` of unit directions in unit normals."""
    d, n = np.asarray(d, float), np.asarray(normal, float)
    _unit_check(n, "normal")
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def snell_refract(d, normal, ratio):
    """Refract unit directions ``d`` at a surface with unit ``normal``.

    ``ratio = n2 / n1`` (medium entered over medium left).  Returns the
    refracted directions (NaN rows under total internal reflection) and the
    TIR mask.  The normal may point to either side.
    """
    d, n = np.asarray(d, float), np.asarray(normal, float)
    _unit_check(n, "normal")
    cos_i = np.sum(d * n, axis=-1, keepdims=True)
    n = np.where(cos_i > 0, -n, n)
    cos_i = np.abs(cos_i)
    r = 1.0 / float(ratio)
    sin2_t = r * r * (1.0 - cos_i ** 2)
    tir = sin2_t[..., 0] > 1.0
    cos_t = np.sqrt(np.clip(1.0 - sin2_t, 0.0, None))
    t = r * d + (r * cos_i - cos_t) * n
    t[tir] = np.nan
    return t, tir


# -- envelope and gradient at arbitrary points ---------------------------------------------

def envelope(potential: DualPotential, x, gradient="fd", eps=1e-6):
    """Envelope value, gradient and active atom at points ``x``.

    ``gradient="closed"`` uses ``-phi_x`` of the active branch, ``"fd"``
    central differences of the envelope itself with step ``eps``.
    """
    x = np.atleast_2d(np.asarray(x, float))
    B = potential.branches(x)
    active = kernels.envelope_argmin(B, potential.tie)[0]
    u = B[np.arange(len(x)), active]
    if gradient == "closed":
        G = potential.gradients(x)
        du = G[np.arange(len(x)), active]
    elif gradient == "fd":
        du = np.empty_like(x)
        for k in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[k] = eps
            du[:, k] = (potential.u(x + e) - potential.u(x - e)) / (2 * eps)
    else:
        raise ValueError("gradient must be 'closed' or 'fd'")
    return u, du, active


def sub_rays(grid: SourceGrid, rays: int = 1):
    """``rays**n`` evenly spaced sub-rays per node: points, masses and parent node."""
    rays = int(rays)
    if rays < 1:
        raise ValueError("rays must be >= 1")
    hw = grid.half_widths
    n = grid.dimension
    ticks = (2 * np.arange(rays) + 1) / rays - 1.0
    offs = np.stack(np.meshgrid(*([ticks] * n), indexing="ij"), axis=-1).reshape(-1, n) * hw
    pts = (grid.nodes[:, None, :] + offs[None]).reshape(-1, n)
    parent = np.repeat(np.arange(grid.size), len(offs))
    mass = np.repeat(grid.node_mass / len(offs), len(offs))
    return pts, mass, parent


# -- trace results ----------------------------------------------------------------------

@dataclass
class TraceReport:
    hits: np.ndarray
    mass: np.ndarray
    parent: np.ndarray
    nearest: np.ndarray
    assigned: np.ndarray
    hit_mass: np.ndarray
    target: np.ndarray
    miss_mass: float
    tir_count: int
    focus_error: np.ndarray = field(repr=False)
    atoms: np.ndarray = field(repr=False, default=None)

    @property
    def traced_mass(self):
        return float(self.mass.sum())

    @property
    def histogram_l1(self):
        """``sum_j |hit mass - g_j| / traced mass`` (misses count against the target)."""
        return float(np.sum(np.abs(self.hit_mass - self.target)) / self.traced_mass)

    @property
    def agreement(self):
        """Fraction of traced mass whose nearest atom equals the cell-assigned atom."""
        ok = (self.nearest == self.assigned) & (self.nearest >= 0)
        return float(self.mass[ok].sum() / self.traced_mass)

    def to_dict(self):
        return {
            "rays": int(len(self.hits)),
            "traced_mass": self.traced_mass,
            "hit_mass": self.hit_mass.tolist(),
            "target": self.target.tolist(),
            "miss_mass": self.miss_mass,
            "tir_count": self.tir_count,
            "histogram_l1": self.histogram_l1,
            "agreement": self.agreement,
            "max_focus_error": float(np.nanmax(self.focus_error)) if len(self.focus_error) else 0.0,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = self.hits.shape[1]
            w.writerow([f"hit{k}" for k in range(dim)] + ["mass", "node", "nearest", "assigned", "focus_error"])
            for k in range(len(self.hits)):
                w.writerow([repr(float(c)) for c in self.hits[k]]
                           + [repr(float(self.mass[k])), int(self.parent[k]), int(self.nearest[k]),
                              int(self.assigned[k]), repr(float(self.focus_error[k]))])


def _finish(hits, mass, parent, ray_atom, assigned, plane_atoms, target, tir):
    """Histogram of hits by nearest atom (in the target plane).

    ``ray_atom`` is the branch active at each ray (the focus it should hit),
    ``assigned`` the cell of the ray's parent node in the dual solve.
    """
    M = len(plane_atoms)
    ok = np.all(np.isfinite(hits), axis=1)
    nearest = np.full(len(hits), -1, dtype=np.intp)
    if ok.any():
        nearest[ok] = kernels.nearest_atom(np.ascontiguousarray(hits[ok]), np.ascontiguousarray(plane_atoms))
    hit_mass = np.bincount(nearest[ok], weights=mass[ok], minlength=M)
    focus = np.full(len(hits), np.nan)
    focus[ok] = np.linalg.norm(hits[ok] - plane_atoms[ray_atom[ok]], axis=1)
    return TraceReport(hits, mass, parent, nearest, assigned, hit_mass, np.asarray(target, float),
                       float(mass[~ok].sum()), int(np.sum(tir)), focus, np.asarray(plane_atoms, float))


def _target(measure, grid, M):
    if measure is None:
        return np.full(M, np.nan)
    w = np.asarray(measure.weights, float)
    return w * grid.node_mass.sum() / w.sum()


def _parallel_normal(du):
    q = np.sum(du * du, axis=1, keepdims=True)
    return np.concatenate([du, -np.ones((len(du), 1))], axis=1) / np.sqrt(1.0 + q)


def _point_normal(x, du):
    """Unit normal of the radial graph ``rho(X) X`` with ``rho = e^u`` in chart coordinates."""
    X = lift(x)
    dx = np.sum(du * x, axis=1, keepdims=True)
    q = np.sum(du * du, axis=1, keepdims=True)
    num = np.concatenate([du, np.zeros((len(x), 1))], axis=1) - (1.0 + dx) * X
    return num / np.sqrt(1.0 + q - dx ** 2), X


def _to_plane(origin, direction, height):
    """Intersect rays with the plane ``z = height`` (last coordinate)."""
    dz = direction[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = (height - origin[:, -1]) / dz
        bad = ~(tau > 0) | ~np.isfinite(tau)
        hit = origin[:, :-1] + tau[:, None] * direction[:, :-1]
    hit[bad] = np.nan
    return hit


def _prepare(grid, potential, rays, gradient, eps):
    pts, mass, parent = sub_rays(grid, rays)
    potential.check(pts)
    u, du, active = envelope(potential, pts, gradient, eps)
    cell = kernels.envelope_argmin(potential.branches(grid.nodes), potential.tie)[0][parent]
    return pts, mass, parent, u, du, active, cell


def trace_parallel_reflector(grid: SourceGrid, potential: DualPotential, measure: AtomicMeasure | None = None,
                             rays=1, gradient="fd", eps=1e-6) -> TraceReport:
    """Vertical rays reflect off ``z = u(x)`` onto the plane ``z = 0``."""
    pts, mass, parent, u, du, active, cell = _prepare(grid, potential, rays, gradient, eps)
    grad2 = np.sum(du * du, axis=1)
    if np.any(grad2 >= 1.0):
        raise TraceError(f"|Du| >= 1 at {int(np.sum(grad2 >= 1))} ray(s); reflected rays miss the target plane")
    if np.any(u <= 0):
        raise TraceError("reflector below the target plane (u <= 0)")
    d = np.zeros((len(pts), grid.dimension + 1))
    d[:, -1] = 1.0
    r = reflect(d, _parallel_normal(du))
    origin = np.concatenate([pts, u[:, None]], axis=1)
    hits = _to_plane(origin, r, 0.0)
    return _finish(hits, mass, parent, active, cell, potential.atoms, _target(measure, grid, potential.size), np.zeros(0))


def _plane_atoms(potential, height=None):
    """In-plane coordinates of point-source targets and the plane height."""
    A = potential.atoms
    h = A[0, -1] if height is None else float(height)
    if np.any(np.abs(A[:, -1] - h) > 1e-12):
        raise TraceError("point-source targets must lie on one plane y_{n+1} = h")
    return A[:, :-1], h


def trace_point_reflector(grid: SourceGrid, potential: DualPotential, measure: AtomicMeasure | None = None,
                          rays=1, gradient="fd", eps=1e-6, height=None) -> TraceReport:
    """Rays ``X`` from the origin reflect off ``e^{u(x)} X`` towards the plane ``y_{n+1} = h``."""
    plane, h = _plane_atoms(potential, height)
    pts, mass, parent, u, du, active, cell = _prepare(grid, potential, rays, gradient, eps)
    gamma, X = _point_normal(pts, du)
    r = reflect(X, gamma)
    hits = _to_plane(np.exp(u)[:, None] * X, r, h)
    return _finish(hits, mass, parent, active, cell, plane, _target(measure, grid, potential.size), np.zeros(0))


def trace_refractor(grid: SourceGrid, potential: DualPotential, measure: AtomicMeasure | None = None,
                    rays=1, gradient="fd", eps=1e-6, mode=None, height=None) -> TraceReport:
    """Refract through the envelope surface with the family's Snell ratio.

    ``mode="point"``: rays ``X`` from the origin meet ``e^{u} X``; targets lie
    on the plane of the atoms.  ``mode="parallel"``: vertical rays meet the
    graph ``z = u(x)`` (below zero) and continue to ``z = h``.
    """
    fam = potential.family
    if fam.snell_ratio is None:
        raise TraceError(f"{fam.identifier} is not a refractor family")
    mode = mode or ("point" if fam.point_source else "parallel")
    pts, mass, parent, u, du, active, cell = _prepare(grid, potential, rays, gradient, eps)
    if mode == "point":
        plane, h = _plane_atoms(potential, height)
        gamma, X = _point_normal(pts, du)
        t, tir = snell_refract(X, gamma, fam.snell_ratio)
        hits = _to_plane(np.exp(u)[:, None] * X, t, h)
    elif mode == "parallel":
        plane = potential.atoms
        h = fam.h if height is None else float(height)
        d = np.zeros((len(pts), grid.dimension + 1))
        d[:, -1] = 1.0
        t, tir = snell_refract(d, _parallel_normal(du), fam.snell_ratio)
        hits = _to_plane(np.concatenate([pts, u[:, None]], axis=1), t, h)
    else:
        raise ValueError("mode must be 'point' or 'parallel'")
    return _finish(hits, mass, parent, active, cell, plane, _target(measure, grid, potential.size), tir)


def trace(grid, potential, measure=None, rays=1, gradient="fd", eps=1e-6) -> TraceReport:
    """Dispatch on the family's optics kind."""
    kind = potential.family.optics
    if kind == "reflector-parallel":
        return trace_parallel_reflector(grid, potential, measure, rays, gradient, eps)
    if kind == "reflector-point":
        return trace_point_reflector(grid, potential, measure, rays, gradient, eps)
    if kind in ("refractor-point", "refractor-parallel"):
        return trace_refractor(grid, potential, measure, rays, gradient, eps)
    raise TraceError(f"{potential.family.identifier} has no near-field optical model")


def map_agreement(grid: SourceGrid, potential: DualPotential, report: TraceReport,
                  cells: CellDecomposition | None = None) -> dict:
    """Compare traced hits with the cell assignment.

    Returns the matched fraction of traced mass, the mass of mismatched rays
    and of boundary-flagged nodes, and the largest focus error at interior
    nodes.
    """
    if potential.family.optics is None:
        raise TraceError(f"{potential.family.identifier} has no reflection/refraction map to compare with")
    cells = cells if cells is not None else decompose(potential.family, grid, potential)
    inside = interior_nodes(grid, cells)[report.parent]
    ok = (report.nearest == report.assigned) & (report.nearest >= 0)
    dist = np.linalg.norm(report.hits - report.atoms[report.assigned], axis=1)[inside]
    return {
        "agreement": float(report.mass[ok].sum() / report.traced_mass),
        "mismatch_mass": float(report.mass[~ok].sum()),
        "boundary_mass": cells.boundary_mass,
        "sup_distance": float(np.nanmax(dist)) if dist.size else 0.0,
    }


# -- Monge-Ampere residuals for the parallel reflector ---------------------------------------

def _hessian(grid, u):
    """Central second differences (NaN where the 3^n stencil is incomplete)."""
    n, h = grid.dimension, grid.spacing
    H = np.full((grid.size, n, n), np.nan)
    for a in range(n):
        ea = np.zeros(n, int)
        ea[a] = 1
        up, dn = grid.offset(ea), grid.offset(-ea)
        ok = (up >= 0) & (dn >= 0)
        H[ok, a, a] = (u[up[ok]] - 2 * u[ok] + u[dn[ok]]) / h[a] ** 2
        for b in range(a + 1, n):
            eb = np.zeros(n, int)
            eb[b] = 1
            pp, pm, mp, mm = (grid.offset(ea + eb), grid.offset(ea - eb),
                              grid.offset(-ea + eb), grid.offset(-ea - eb))
            okb = (pp >= 0) & (pm >= 0) & (mp >= 0) & (mm >= 0)
            val = (u[pp[okb]] - u[pm[okb]] - u[mp[okb]] + u[mm[okb]]) / (4 * h[a] * h[b])
            H[okb, a, b] = val
            H[okb, b, a] = val
    return H


def parallel_reflector_map(du, u):
    """``T = x + 2 u Du / (1 - |Du|^2)`` displacement part (add ``x``)."""
    q = np.sum(du * du, axis=-1, keepdims=True)
    return 2.0 * u[..., None] * du / (1.0 - q)


def ma_residual_parallel(grid: SourceGrid, u, f, g):
    """Residual of the parallel-reflector Monge-Ampere equation at stencil-complete nodes.

    ``det(D^2 u + (1 - |Du|^2)/(2u) I) = (1 - |Du|^2)^{n+1} / ((2u)^n (1 + |Du|^2)) f / g(T)``.
    ``f`` is given per node, ``g`` is a callable on target points.  Returns
    ``(nodes, residual)``.
    """
    u = np.asarray(u, float)
    n = grid.dimension
    du = lattice_gradient(grid, u)
    H = _hessian(grid, u)
    ok = np.all(np.isfinite(du), axis=1) & np.all(np.isfinite(H.reshape(grid.size, -1)), axis=1)
    idx = np.flatnonzero(ok)
    q = np.sum(du[idx] ** 2, axis=1)
    uu = u[idx]
    A = H[idx] + ((1 - q) / (2 * uu))[:, None, None] * np.eye(n)
    T = grid.nodes[idx] + parallel_reflector_map(du[idx], uu)
    rhs = (1 - q) ** (n + 1) / ((2 * uu) ** n * (1 + q)) * np.asarray(f, float)[idx] / g(T)
    return idx, np.linalg.det(A) - rhs


def jacobian_identity(grid: SourceGrid, u, f, g, transport=None):
    """``|det DT| g(T) - f`` with ``T`` built from lattice gradients of ``u``.

    ``transport(du, u, x)`` returns the map; the default is the parallel
    reflector map.  ``DT`` is a central difference of ``T``, so nodes need a
    stencil of radius two.
    """
    u = np.asarray(u, float)
    x = grid.nodes
    du = lattice_gradient(grid, u)
    if transport is None:
        T = x + parallel_reflector_map(du, u)
    else:
        T = transport(du, u, x)
    n = grid.dimension
    DT = np.full((grid.size, n, n), np.nan)
    for a in range(n):
        up, dn = grid.neighbor(a, 1), grid.neighbor(a, -1)
        ok = (up >= 0) & (dn >= 0)
        DT[ok, :, a] = (T[up[ok]] - T[dn[ok]]) / (2 * grid.spacing[a])
    ok = np.all(np.isfinite(DT.reshape(grid.size, -1)), axis=1) & np.all(np.isfinite(T), axis=1)
    idx = np.flatnonzero(ok)
    res = np.abs(np.linalg.det(DT[idx])) * g(T[idx]) - np.asarray(f, float)[idx]
    return idx, res


def brenier_map(du, u, x):
    """Quadratic-cost transport in the gradient convention ``T = Du``."""
    return du
