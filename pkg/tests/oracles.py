"""Independent reference computations used by the tests.

Nothing here calls into the code under test except to evaluate plain
constraint functions; each oracle follows a different route than the
implementation it checks.
"""
import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog


def brute_force_min_assignment(C):
    C = np.asarray(C, float)
    n = len(C)
    return min(sum(C[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def scipy_assignment(C):
    r, c = linear_sum_assignment(C)
    return float(np.asarray(C)[r, c].sum())


def cap_area(r):
    """Surface area of the spherical cap over the chart disk of radius ``r``."""
    return 2 * np.pi * (1 - np.sqrt(1 - r * r))


def snell_angle(theta_i, ratio):
    """Refraction angle from the scalar law ``sin t = sin i / ratio``."""
    return np.arcsin(np.sin(theta_i) / ratio)


def zoom_maximize(f, lo, hi, feasible=None, points=9, rounds=60, shrink=0.5):
    """Grid search with repeated zooming around the best feasible grid point.

    Meant for at most four variables.  ``f`` and ``feasible`` take a
    ``(K, d)`` array of points.
    """
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    box_lo, box_hi = lo.copy(), hi.copy()
    best_z, best_val = None, -np.inf
    for _ in range(rounds):
        axes = [np.linspace(a, b, points) for a, b in zip(lo, hi)]
        Z = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
        vals = np.asarray(f(Z), float)
        if feasible is not None:
            vals = np.where(feasible(Z), vals, -np.inf)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_z, best_val = Z[k], float(vals[k])
        if best_z is None:
            return None, -np.inf
        half = shrink * (hi - lo) / 2
        lo = np.maximum(best_z - half, box_lo)
        hi = np.minimum(best_z + half, box_hi)
    return best_z, best_val


def table_problem(C, omega, objective, params):
    """Vectorised ``I``, ``psi`` for a table cost ``phi_ij = s_j - C_ij`` (written from scratch)."""
    C = np.asarray(C, float)
    I, J = C.shape

    def parts(Z):
        U, V = Z[:, :I], Z[:, I:]
        return U[:, :, None], V[:, None, :]

    def value(Z):
        U, V = parts(Z)
        if objective == "separable":
            # f_i t + g_j phi with phi = s - C for a table cost
            f = np.asarray(params["f"], float)[None, :, None]
            g = np.asarray(params["g"], float)[None, None, :]
            return np.sum(omega[None] * (f * U + g * (V - C[None])), axis=(1, 2))
        a = np.asarray(params["a"], float)[None, :, None]
        b = np.asarray(params["b"], float)[None, None, :]
        F = a * U + b * V
        if objective == "quadratic-concave":
            c = params["c"]
            F = F - 0.5 * c * ((U - params.get("t0", 0.0)) ** 2 + (V - params.get("s0", 0.0)) ** 2)
        return np.sum(omega[None] * F, axis=(1, 2))

    def psi(Z):
        U, V = parts(Z)
        return np.min((C[None] - U - V).reshape(len(Z), -1), axis=1)

    return value, psi


def lp_primal_table(C, omega, a, b, t_box, s_box):
    """``max sum omega_ij (a_i u_i + b_j v_j)`` s.t. ``u_i + v_j <= C_ij`` via linprog."""
    C = np.asarray(C, float)
    I, J = C.shape
    c = -np.concatenate([a * omega.sum(axis=1), b * omega.sum(axis=0)])
    A, rhs = [], []
    for i in range(I):
        for j in range(J):
            row = np.zeros(I + J)
            row[i], row[I + j] = 1.0, 1.0
            A.append(row)
            rhs.append(C[i, j])
    res = linprog(c, A_ub=np.array(A), b_ub=np.array(rhs),
                  bounds=[t_box] * I + [s_box] * J, method="highs")
    assert res.status == 0, res.message
    return -res.fun, res.x


def mc_cell_masses(potential, chart, rng, samples=400_000, density=None):
    """Monte Carlo cell masses: uniform samples in the chart, argmin of the branches."""
    lo, hi = chart.bounding_box()
    pts = rng.uniform(lo, hi, (samples, len(lo)))
    inside = chart.contains(pts)
    vol = np.prod(hi - lo)
    w = np.full(samples, vol / samples)
    if chart.lifted:
        w = w / np.sqrt(np.clip(1 - np.sum(pts * pts, axis=1), 1e-300, None))
    if density is not None:
        w = w * density(pts)
    w[~inside] = 0.0
    B = np.stack([-potential.family.phi(pts, potential.atoms[j], potential.s[j])
                  for j in range(len(potential.s))], axis=1)
    B[~inside] = 0.0
    j = np.argmin(B, axis=1)
    return np.bincount(j, weights=w, minlength=len(potential.s))


def bisect_root(fn, a, b, iters=200):
    """Plain bisection for an increasing scalar function with fn(a) < 0 < fn(b)."""
    fa = fn(a)
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = fn(m)
        if (fm < 0) == (fa < 0):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)
