"""Generalized conjugation, dual pairs and cell decompositions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .constraint import ConstraintFamily, InvalidPoint, OutsideDualDomain, require_valid, solve_s
from .measure import AtomicMeasure, SourceGrid

TIE_TOL = 1e-12


class NondifferentiablePoint(ValueError):
    """The envelope has a kink within the finite-difference stencil."""


def _nodes(grid) -> np.ndarray:
    return grid.nodes if isinstance(grid, SourceGrid) else np.atleast_2d(np.asarray(grid, float))


def _atoms(atoms) -> np.ndarray:
    if isinstance(atoms, AtomicMeasure):
        return atoms.atoms
    a = np.asarray(atoms, float)
    return a[:, None] if a.ndim == 1 else a


def branch_values(family, x, atoms, s) -> np.ndarray:
    """``B[i, j] = -phi(x_i, y_j, s_j)``."""
    x, atoms = np.asarray(x, float), _atoms(atoms)
    return -np.stack([family.phi(x, atoms[j], s[j]) for j in range(len(atoms))], axis=1)


def branch_gradients(family, x, atoms, s) -> np.ndarray:
    """``G[i, j] = -phi_x(x_i, y_j, s_j)``, shape (N, M, n)."""
    x, atoms = np.asarray(x, float), _atoms(atoms)
    return -np.stack([family.phi_x(x, atoms[j], s[j]) for j in range(len(atoms))], axis=1)


@dataclass
class DualPotential:
    """Dual weights ``s_j`` on atoms ``y_j`` and the envelope ``u = min_j -phi``."""

    family: ConstraintFamily
    atoms: np.ndarray
    s: np.ndarray
    tie: float = TIE_TOL

    def __post_init__(self):
        self.atoms = _atoms(self.atoms)
        self.s = np.asarray(self.s, float).ravel().copy()
        if len(self.s) != len(self.atoms):
            raise ValueError("one dual weight per atom required")

    @property
    def size(self):
        return len(self.s)

    def check(self, x):
        x = np.asarray(x, float)
        for j in range(self.size):
            require_valid(self.family, x, self.atoms[j], self.s[j], where=f"potential (atom {j})")

    def branches(self, x):
        return branch_values(self.family, x, self.atoms, self.s)

    def gradients(self, x):
        return branch_gradients(self.family, x, self.atoms, self.s)

    def u(self, x):
        return self.branches(np.atleast_2d(x)).min(axis=1)

    def active(self, x):
        return kernels.envelope_argmin(self.branches(np.atleast_2d(x)), self.tie)[0]

    def with_s(self, s):
        return DualPotential(self.family, self.atoms, s, self.tie)


# -- conjugation ------------------------------------------------------------------

def v_transform(family, grid, u_values, atoms) -> np.ndarray:
    """``s_j = min_i solve_s(x_i, y_j, u_i)``: the largest feasible dual weights."""
    x = _nodes(grid)
    u = np.asarray(u_values, float)
    if u.shape != (len(x),) or not np.all(np.isfinite(u)):
        raise ValueError("u_values must be finite, one per node")
    A = _atoms(atoms)
    out = np.empty(len(A))
    for j in range(len(A)):
        try:
            roots = solve_s(family, x, A[j], u, beyond="inf")
        except OutsideDualDomain as exc:
            raise OutsideDualDomain(f"atom {j}: {exc}") from None
        out[j] = roots.min()
        if not np.isfinite(out[j]):
            raise OutsideDualDomain(f"atom {j}: constraint never binds inside the s-range")
    return out


def u_transform(family, grid, potential: DualPotential) -> np.ndarray:
    """``u*_i = min_j -phi(x_i, y_j, s_j)``."""
    x = _nodes(grid)
    potential.check(x)
    return potential.branches(x).min(axis=1)


def constraint_slack(family, grid, atoms, u, s) -> np.ndarray:
    """Matrix ``u_i + phi(x_i, y_j, s_j)`` (feasible iff all entries <= 0)."""
    return np.asarray(u, float)[:, None] - branch_values(family, _nodes(grid), atoms, np.asarray(s, float))


@dataclass
class TightenResult:
    u: np.ndarray
    potential: DualPotential
    feasible_start: bool | None
    residual: float


def tighten(family, grid, atoms, u_values, s=None) -> TightenResult:
    """Replace ``(u, s)`` by ``(u*, s*)`` with ``s* = v(u)`` and ``u* = u(s*)``."""
    x = _nodes(grid)
    A = _atoms(atoms)
    feasible = None
    if s is not None:
        feasible = bool(np.all(constraint_slack(family, x, A, u_values, s) <= 1e-10))
    s_star = v_transform(family, x, u_values, A)
    pot = DualPotential(family, A, s_star)
    u_star = u_transform(family, x, pot)
    return TightenResult(u_star, pot, feasible, dual_pair_residual(family, x, A, u_star, s_star))


def dual_pair_residual(family, grid, atoms, u, s) -> float:
    """Max deviation of ``(u, s)`` from being mutual transforms."""
    x = _nodes(grid)
    pot = DualPotential(family, atoms, s)
    r_u = np.max(np.abs(u_transform(family, x, pot) - u))
    r_s = np.max(np.abs(v_transform(family, x, u, atoms) - np.asarray(s)))
    return float(max(r_u, r_s))


def separable_objective(family, grid: SourceGrid, measure: AtomicMeasure, u, s) -> float:
    """``sum_i w_i f_i u_i + sum_ij w_i g^_j phi(x_i, y_j, s_j)`` with ``g^ = g / sum g``."""
    ghat = measure.weights / measure.weights.sum()
    phi = -branch_values(family, grid.nodes, measure.atoms, np.asarray(s, float))
    return float(np.dot(grid.node_mass, u) + grid.weights @ phi @ ghat)


# -- cells ------------------------------------------------------------------------

@dataclass
class CellDecomposition:
    """Cell assignment of every node plus partial-volume cell masses.

    ``active`` is the lowest-index minimising branch at the node itself;
    ``fractions[i, j]`` is the share of node ``i``'s lattice cell on which
    branch ``j`` is lowest (linear branch model over the cell), and
    ``masses = node_mass @ fractions``.
    """

    active: np.ndarray
    fractions: np.ndarray
    masses: np.ndarray
    hard_masses: np.ndarray
    boundary: np.ndarray
    ties: np.ndarray
    node_mass: np.ndarray = field(repr=False)

    @property
    def size(self):
        return len(self.masses)

    def nodes_of(self, j) -> np.ndarray:
        return np.flatnonzero(self.active == j)

    @property
    def boundary_mass(self) -> float:
        return float(self.node_mass[self.boundary].sum())


def decompose(family, grid: SourceGrid, potential: DualPotential, backend=None) -> CellDecomposition:
    potential.check(grid.nodes)
    k = kernels.get_backend(backend)
    B = potential.branches(grid.nodes)
    G = potential.gradients(grid.nodes)
    active, ties = k.envelope_argmin(B, potential.tie)
    frac = k.cell_fractions(B, G, grid.half_widths, potential.tie)
    mass = grid.node_mass
    split = frac[np.arange(len(active)), active] < 1.0 - 1e-14
    return CellDecomposition(
        active=np.asarray(active),
        fractions=frac,
        masses=mass @ frac,
        hard_masses=np.bincount(active, weights=mass, minlength=potential.size),
        boundary=np.asarray(ties, bool) | split,
        ties=np.asarray(ties, bool),
        node_mass=mass,
    )


def generalized_residual(grid: SourceGrid, measure: AtomicMeasure, cells: CellDecomposition):
    """Per-atom ``r_j = M_j - g_j`` and ``max |r_j| / total source mass``."""
    r = cells.masses - measure.weights
    return r, float(np.max(np.abs(r)) / grid.node_mass.sum())


# -- gradients and identities -------------------------------------------------------

def interior_nodes(grid: SourceGrid, cells: CellDecomposition) -> np.ndarray:
    """Nodes whose full stencil exists, shares their active atom and has no boundary flag."""
    ok = ~cells.boundary.copy()
    for axis in range(grid.dimension):
        for step in (-1, 1):
            nb = grid.neighbor(axis, step)
            has = nb >= 0
            ok &= has
            nbc = np.where(has, nb, 0)
            ok &= (cells.active[nbc] == cells.active) & ~cells.boundary[nbc]
    return ok


def lattice_gradient(grid: SourceGrid, values) -> np.ndarray:
    """Central differences on the lattice (NaN where a neighbour is missing)."""
    values = np.asarray(values, float)
    out = np.full((grid.size, grid.dimension), np.nan)
    for axis in range(grid.dimension):
        up, dn = grid.neighbor(axis, 1), grid.neighbor(axis, -1)
        ok = (up >= 0) & (dn >= 0)
        out[ok, axis] = (values[up[ok]] - values[dn[ok]]) / (2 * grid.spacing[axis])
    return out


def envelope_gradient(family, grid: SourceGrid, potential: DualPotential, node: int, cells=None):
    """Lattice-difference ``Du`` at ``node`` and ``|phi_x(x, y_j*, s_j*) + Du|``."""
    cells = cells if cells is not None else decompose(family, grid, potential)
    if not interior_nodes(grid, cells)[node]:
        raise NondifferentiablePoint(f"node {node} is on or next to a cell boundary")
    u = potential.branches(grid.nodes).min(axis=1)
    du = np.empty(grid.dimension)
    for axis in range(grid.dimension):
        up, dn = grid.neighbor(axis, 1)[node], grid.neighbor(axis, -1)[node]
        du[axis] = (u[up] - u[dn]) / (2 * grid.spacing[axis])
    j = cells.active[node]
    px = family.phi_x(grid.nodes[node], potential.atoms[j], potential.s[j])
    return du, float(np.max(np.abs(px + du)))


def envelope_identity(family, grid: SourceGrid, potential: DualPotential, cells=None):
    """Identity residuals ``|phi_x + Du|`` (max norm) at every interior node."""
    cells = cells if cells is not None else decompose(family, grid, potential)
    inside = np.flatnonzero(interior_nodes(grid, cells))
    u = potential.branches(grid.nodes).min(axis=1)
    du = lattice_gradient(grid, u)[inside]
    j = cells.active[inside]
    px = family.phi_x(grid.nodes[inside], potential.atoms[j], potential.s[j])
    return inside, np.max(np.abs(px + du), axis=1)


def lipschitz_check(family, grid: SourceGrid, potential: DualPotential, u=None):
    """Largest adjacent-node difference quotient of ``u`` and the sampled bound.

    The bound is ``sup (|phi_x| + |phi_y|)`` over the nodes, the midpoints of
    lattice edges and all atoms at the current weights.
    """
    x = grid.nodes
    u = potential.branches(x).min(axis=1) if u is None else np.asarray(u, float)
    ratio, pts = 0.0, [x]
    for axis in range(grid.dimension):
        nb = grid.neighbor(axis, 1)
        ok = nb >= 0
        if ok.any():
            ratio = max(ratio, float(np.max(np.abs(u[nb[ok]] - u[ok]) / grid.spacing[axis])))
            pts.append(0.5 * (x[ok] + x[nb[ok]]))
    pts = np.concatenate(pts)
    bound = 0.0
    for j in range(potential.size):
        a, sj = potential.atoms[j], potential.s[j]
        g = np.linalg.norm(family.phi_x(pts, a, sj), axis=-1) + np.linalg.norm(family.phi_y(pts, a, sj), axis=-1)
        bound = max(bound, float(np.nanmax(g)))
    return ratio, bound


def measure_preservation(grid: SourceGrid, measure: AtomicMeasure, cells: CellDecomposition, h) -> float:
    """``sum_i w_i f_i h(y_{j*(i)}) - sum_j g_j h(y_j)`` for a test function ``h``."""
    hv = np.asarray(h(measure.atoms), float)
    return float(np.dot(cells.node_mass, hv[cells.active]) - np.dot(measure.weights, hv))


__all__ = [
    "DualPotential", "CellDecomposition", "TightenResult", "NondifferentiablePoint", "InvalidPoint",
    "v_transform", "u_transform", "tighten", "dual_pair_residual", "decompose", "generalized_residual",
    "envelope_gradient", "envelope_identity", "lipschitz_check", "measure_preservation",
    "separable_objective", "branch_values", "branch_gradients", "constraint_slack", "interior_nodes",
]
