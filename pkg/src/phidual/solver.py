"""Semi-discrete dual solve and the discrete assignment oracle."""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .catalog import MatrixCostFamily
from .constraint import InvalidPoint, OutsideDualDomain, solve_s
from .measure import AtomicMeasure, SourceGrid, balance_check, total_mass
from .transforms import (DualPotential, branch_gradients, branch_values, decompose,
                         separable_objective, tighten, u_transform, v_transform)


class NonConvergence(RuntimeError):
    def __init__(self, msg, potential=None, report=None):
        super().__init__(msg)
        self.potential = potential
        self.report = report


@dataclass
class SolveOptions:
    tol_mass: float = 1e-6
    max_sweeps: int = 500
    anchor: int = 0
    bisection_depth: int = 80
    newton: bool = False
    init_height: float | None = None
    backend: str | None = None

    def __post_init__(self):
        if not self.tol_mass > 0:
            raise ValueError("tol_mass must be positive")
        if self.max_sweeps < 1 or self.bisection_depth < 1:
            raise ValueError("max_sweeps and bisection_depth must be >= 1")


@dataclass
class SolveReport:
    s: list
    residuals: list
    max_residual: float
    converged: bool
    sweeps: int
    wall_clock: float
    objective: float
    dual_pair_residual: float
    target_scale: float
    anchor: int
    history: list = field(default_factory=list)
    message: str = ""

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d


def working_range(family, x, y):
    """Admissible s for atom ``y`` simultaneously at every node ``x``."""
    lo, hi = family.s_bounds(x, y)
    lo, hi = float(np.max(lo)), float(np.min(hi))
    if not lo < hi:
        raise InvalidPoint(f"{family.identifier}: no weight is valid at every node for atom {np.round(y, 6).tolist()}")
    pad = 1e-9 * (1 + max(abs(lo) if np.isfinite(lo) else 0, abs(hi) if np.isfinite(hi) else 0))
    return lo + pad if np.isfinite(lo) else lo, hi - pad if np.isfinite(hi) else hi


def initial_weights(family, grid: SourceGrid, atoms, height=None):
    """Weights whose single-atom branches pass through a common height at the centroid."""
    c = grid.centroid()[None, :]
    atoms = np.asarray(atoms, float)
    if height is None:
        ref = np.array([family.s_guess(c, a[None], 0.0)[0] for a in atoms])
        vals = np.array([-family.phi(c, a[None], r)[0] for a, r in zip(atoms, ref)])
        height = float(np.median(vals[np.isfinite(vals)]))
    s = np.empty(len(atoms))
    for j, a in enumerate(atoms):
        lo, hi = working_range(family, grid.nodes, a)
        try:
            sj = float(solve_s(family, c, a[None], np.array([height]), beyond="inf")[0])
        except OutsideDualDomain:
            sj = lo
        if not np.isfinite(sj):
            sj = hi
        if np.isfinite(lo) and np.isfinite(hi):
            sj = min(max(sj, lo + 0.05 * (hi - lo)), hi - 0.05 * (hi - lo))
        elif np.isfinite(lo):
            sj = max(sj, lo + 1e-3 * (1 + abs(lo)))
        elif np.isfinite(hi):
            sj = min(sj, hi - 1e-3 * (1 + abs(hi)))
        s[j] = sj
    return s


class _MassModel:
    """Cached branch values/gradients with single-column updates."""

    def __init__(self, family, grid, atoms, s, backend=None):
        self.family, self.grid = family, grid
        self.atoms = np.asarray(atoms, float)
        self.s = np.array(s, float)
        self.k = kernels.get_backend(backend)
        self.x = grid.nodes
        self.hw = grid.half_widths
        self.mass = np.ascontiguousarray(grid.node_mass)
        self.B = np.ascontiguousarray(branch_values(family, self.x, self.atoms, self.s))
        self.G = np.ascontiguousarray(branch_gradients(family, self.x, self.atoms, self.s))
        self.evals = 0

    def set(self, j, sj):
        self.s[j] = sj
        self.B[:, j] = -self.family.phi(self.x, self.atoms[j], sj)
        self.G[:, j, :] = -self.family.phi_x(self.x, self.atoms[j], sj)

    def mass_of(self, j, sj=None):
        if sj is not None:
            self.set(j, sj)
        self.evals += 1
        return self.k.atom_mass(self.B, self.G, self.hw, self.mass, j)

    def masses(self):
        return self.mass @ self.k.cell_fractions(self.B, self.G, self.hw)


def _match_atom(model: _MassModel, j, target, lo, hi, depth):
    """Set ``s_j`` so that atom ``j`` carries ``target`` with the other weights frozen."""
    s0 = model.s[j]
    f0 = model.mass_of(j, s0) - target
    if f0 == 0:
        return s0
    up = f0 < 0
    bound = hi if up else lo
    step = 0.05 * (1 + abs(s0))
    a, fa = s0, f0
    for _ in range(200):
        if np.isfinite(bound):
            b = a + np.sign(bound - a) * min(step, 0.5 * abs(bound - a))
        else:
            b = a + (step if up else -step)
        fb = model.mass_of(j, b) - target
        if np.sign(fb) != np.sign(fa) or fb == 0:
            break
        a, fa = b, fb
        step *= 2
    else:
        model.set(j, a)
        return a
    if fb == 0:
        return b
    lo_, hi_ = (a, b) if a < b else (b, a)
    root = brentq(lambda z: model.mass_of(j, z) - target, lo_, hi_, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                  maxiter=max(depth, 100))
    model.set(j, root)
    return root


def _match_anchor(model: _MassModel, anchor, free, target, ranges, depth):
    """Shift every free weight by a common amount until the anchor carries ``target``.

    Gauss-Seidel sweeps over single atoms cannot move mass into a frozen
    anchor cell efficiently; this is one coordinate step along the all-free
    direction.
    """
    base = model.s.copy()
    lo = max(ranges[k][0] - base[k] for k in free)
    hi = min(ranges[k][1] - base[k] for k in free)

    def f(d):
        for k in free:
            model.set(k, base[k] + d)
        return model.mass_of(anchor) - target

    f0 = f(0.0)
    if f0 == 0:
        return
    # anchor mass decreases as the free weights rise
    up = f0 > 0
    bound = hi if up else lo
    step = 0.05 * (1 + np.max(np.abs(base)))
    a, fa = 0.0, f0
    for _ in range(200):
        b = a + np.sign(bound - a) * min(step, 0.5 * abs(bound - a)) if np.isfinite(bound) else a + (step if up else -step)
        fb = f(b)
        if np.sign(fb) != np.sign(fa) or fb == 0:
            break
        a, fa = b, fb
        step *= 2
    else:
        f(a)
        return
    if fb != 0:
        lo_, hi_ = (a, b) if a < b else (b, a)
        b = brentq(f, lo_, hi_, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=max(depth, 100))
    f(b)


def _newton_step(model: _MassModel, g, free, ranges, total):
    r = model.masses() - g
    base = np.max(np.abs(r[free]))
    J = np.empty((len(free), len(free)))
    s0 = model.s.copy()
    for c, k in enumerate(free):
        h = 1e-7 * (1 + abs(s0[k]))
        model.set(k, s0[k] + h)
        mp = model.masses()
        model.set(k, s0[k] - h)
        mm = model.masses()
        model.set(k, s0[k])
        J[:, c] = (mp[free] - mm[free]) / (2 * h)
    try:
        delta = np.linalg.solve(J, -r[free])
    except np.linalg.LinAlgError:
        return False
    lam = 1.0
    for _ in range(30):
        trial = s0.copy()
        trial[free] = s0[free] + lam * delta
        lo = np.array([ranges[k][0] for k in free])
        hi = np.array([ranges[k][1] for k in free])
        if np.all((trial[free] > lo) & (trial[free] < hi)):
            for k in free:
                model.set(k, trial[k])
            if np.max(np.abs((model.masses() - g)[free])) < base:
                return True
        lam *= 0.5
    for k in free:
        model.set(k, s0[k])
    return False


def solve_semidiscrete(family, grid: SourceGrid, measure: AtomicMeasure, options: SolveOptions | None = None):
    """Dual weights whose partial-volume cell masses match the target weights."""
    opts = options or SolveOptions()
    t_start = time.perf_counter()
    ok, deficit = balance_check(grid, measure, 1e-3)
    if not ok:
        raise ValueError(f"source and target masses differ by {deficit:.3e} (relative tolerance 1e-3)")
    total = total_mass(grid)
    scale = total / total_mass(measure)
    g = measure.weights * scale
    M = measure.size
    if not 0 <= opts.anchor < M:
        raise ValueError("anchor index out of range")
    if measure.atoms.shape[1] != family.target_dim(grid.dimension):
        raise ValueError(f"{family.identifier} expects {family.target_dim(grid.dimension)}-dimensional atoms")
    ranges = [working_range(family, grid.nodes, a) for a in measure.atoms]
    s0 = initial_weights(family, grid, measure.atoms, opts.init_height)
    DualPotential(family, measure.atoms, s0).check(grid.nodes)
    model = _MassModel(family, grid, measure.atoms, s0, opts.backend)
    free = [j for j in range(M) if j != opts.anchor]
    history = []
    masses = model.masses()
    tol_abs = opts.tol_mass * total
    sweeps, converged = 0, bool(np.max(np.abs(masses - g)) <= tol_abs)
    while not converged and sweeps < opts.max_sweeps:
        sweeps += 1
        if opts.newton and sweeps > 1:
            _newton_step(model, g, free, ranges, total)
        if free and abs(model.mass_of(opts.anchor) - g[opts.anchor]) > 0.1 * tol_abs:
            _match_anchor(model, opts.anchor, free, g[opts.anchor], ranges, opts.bisection_depth)
        for j in free:
            mj = model.mass_of(j)
            if abs(mj - g[j]) > 0.1 * tol_abs:
                _match_atom(model, j, g[j], *ranges[j], opts.bisection_depth)
        masses = model.masses()
        history.append(float(np.max(np.abs(masses - g)[free])) if free else 0.0)
        converged = bool(np.max(np.abs(masses - g)) <= tol_abs)
    pot = DualPotential(family, measure.atoms, model.s.copy())
    cells = decompose(family, grid, pot, opts.backend)
    resid = cells.masses - g
    u = u_transform(family, grid, pot)
    dpr = tighten(family, grid, measure.atoms, u).residual
    scaled = AtomicMeasure(measure.atoms, g)
    report = SolveReport(
        s=pot.s.tolist(), residuals=resid.tolist(), max_residual=float(np.max(np.abs(resid)) / total),
        converged=converged, sweeps=sweeps, wall_clock=time.perf_counter() - t_start,
        objective=separable_objective(family, grid, scaled, u, pot.s), dual_pair_residual=dpr,
        target_scale=scale, anchor=opts.anchor, history=history,
        message="converged" if converged else f"no convergence after {sweeps} sweeps",
    )
    return pot, report


def cell_mass_curve(family, grid: SourceGrid, potential: DualPotential, j: int, samples, backend=None):
    """``M_j(s)`` at the sampled weights with every other weight frozen."""
    model = _MassModel(family, grid, potential.atoms, potential.s, backend)
    out = []
    for sj in np.asarray(samples, float):
        DualPotential(family, potential.atoms[j:j + 1], [sj]).check(grid.nodes)
        out.append(model.mass_of(j, sj))
    return np.array(out)


# -- discrete-discrete mode --------------------------------------------------------

def hungarian(cost):
    """Minimum-cost perfect matching with dual potentials ``u_i + v_j <= c_ij``."""
    C = np.asarray(cost, float)
    n = C.shape[0]
    if C.shape != (n, n):
        raise ValueError("cost matrix must be square")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, bool)
        while True:
            used[j0] = True
            i0, delta, j1 = p[j0], INF, 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j], way[j] = cur, j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        assign[p[j] - 1] = j - 1
    return assign, float(C[np.arange(n), assign].sum()), u[1:], v[1:]


def solve_discrete_ot(cost):
    """Discrete-discrete mode: matching plus a dual pair made tight by conjugation."""
    C = np.asarray(cost, float)
    assign, value, u, v = hungarian(C)
    fam = MatrixCostFamily(C)
    xi = np.arange(C.shape[0], dtype=float)[:, None]
    yj = np.arange(C.shape[1], dtype=float)[:, None]
    res = tighten(fam, xi, yj, u)
    s = res.potential.s
    return {"assignment": assign, "primal": value, "u": res.u, "v": s,
            "dual": float(res.u.sum() + s.sum()), "dual_pair_residual": res.residual,
            "feasible": bool(np.all(res.u[:, None] + s[None, :] <= C + 1e-12))}


def brute_force_assignment(cost):
    C = np.asarray(cost, float)
    n = C.shape[0]
    best, arg = np.inf, None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        val = C[rows, perm].sum()
        if val < best:
            best, arg = val, perm
    return float(best), np.array(arg)


def discrete_oracle_ot(cost, max_n=8):
    """Exhaustive primal optimum against the dual value of the discrete mode."""
    C = np.asarray(cost, float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("square cost matrix required")
    if C.shape[0] > max_n:
        raise ValueError(f"brute force limited to N <= {max_n}")
    primal, perm = brute_force_assignment(C)
    d = solve_discrete_ot(C)
    gap = abs(d["dual"] - primal)
    return {"primal": primal, "permutation": perm, "dual": d["dual"], "u": d["u"], "v": d["v"],
            "relative_gap": gap / max(abs(primal), 1.0),
            "feasible": d["feasible"]}
