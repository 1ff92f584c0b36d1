"""Pure-numpy cell kernels (fallback for the compiled extension).

Branch values ``B[i, j]`` and chart gradients ``G[i, j, :]`` of the branches
``-phi(., y_j, s_j)`` at node ``i`` define a linear model of every branch over
the node's lattice cell ``x_i + [-hw, hw]^n``.  The fraction of the cell on
which branch ``j`` is the lowest is the area of the cell clipped by the
half-planes ``(B_j - B_l) + (G_j - G_l).z <= 0``.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def envelope_argmin(B, tie=1e-12):
    """Lowest-index minimiser per row and a flag for rows with a tie."""
    B = np.asarray(B, float)
    m = B.min(axis=1, keepdims=True)
    near = B <= m + tie
    return np.argmax(near, axis=1), near.sum(axis=1) > 1


def _trapezoid_cdf(w, a, b):
    """P(U + V <= w) for U ~ U(-a, a), V ~ U(-b, b), a >= b > 0."""
    out = np.where(w <= -a - b, 0.0, 1.0)
    lo = (w > -a - b) & (w <= -a + b)
    mid = (w > -a + b) & (w <= a - b)
    hi = (w > a - b) & (w < a + b)
    out = np.where(lo, (w + a + b) ** 2 / (8 * a * b), out)
    out = np.where(mid, (w + a) / (2 * a), out)
    return np.where(hi, 1 - (a + b - w) ** 2 / (8 * a * b), out)


def _single_halfplane(D, E, hw):
    """Fraction of the box with ``D + E.z <= 0`` (one constraint)."""
    w = -D
    if E.shape[-1] == 1:
        a = np.abs(E[:, 0]) * hw[0]
        return np.clip((w + a) / (2 * a), 0.0, 1.0)
    u = np.abs(E[:, 0]) * hw[0]
    v = np.abs(E[:, 1]) * hw[1]
    a, b = np.maximum(u, v), np.minimum(u, v)
    flat = b <= 1e-15 * a
    with np.errstate(divide="ignore", invalid="ignore"):
        res = _trapezoid_cdf(w, a, np.where(flat, 1.0, b))
        res1 = np.clip((w + a) / (2 * a), 0.0, 1.0)
    return np.where(flat, res1, res)


def _clip_polygon(poly, d, e):
    out = []
    k = len(poly)
    for idx in range(k):
        p, q = poly[idx], poly[(idx + 1) % k]
        fp = d + e[0] * p[0] + e[1] * p[1]
        fq = d + e[0] * q[0] + e[1] * q[1]
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            lam = fp / (fp - fq)
            out.append((p[0] + lam * (q[0] - p[0]), p[1] + lam * (q[1] - p[1])))
    return out


def _area(poly):
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    for idx in range(len(poly)):
        p, q = poly[idx], poly[(idx + 1) % len(poly)]
        acc += p[0] * q[1] - q[0] * p[1]
    return 0.5 * abs(acc)


def _multi_halfplane(Ds, Es, hw):
    if Es.shape[-1] == 1:
        lo, hi = -hw[0], hw[0]
        for d, e in zip(Ds, Es[:, 0]):
            if e > 0:
                hi = min(hi, -d / e)
            else:
                lo = max(lo, -d / e)
        return max(hi - lo, 0.0) / (2 * hw[0])
    h0, h1 = hw
    poly = [(-h0, -h1), (h0, -h1), (h0, h1), (-h0, h1)]
    for d, e in zip(Ds, Es):
        poly = _clip_polygon(poly, d, e)
        if not poly:
            return 0.0
    return _area(poly) / (4 * h0 * h1)


def _fractions_for(B, G, hw, j, tie, rows=None):
    if rows is not None:
        B, G = B[rows], G[rows]
    N, M = B.shape
    D = B[:, j:j + 1] - B
    E = G[:, j:j + 1, :] - G
    reach = np.abs(E) @ hw
    other = np.arange(M) != j
    degen = reach <= tie
    lower = np.arange(M) < j
    lose = degen & ((D > tie) | ((np.abs(D) <= tie) & lower[None, :]))
    lose |= ~degen & (D - reach >= 0)
    lose &= other
    cut = ~degen & (D + reach > 0) & (D - reach < 0) & other
    frac = np.ones(N)
    frac[lose.any(axis=1)] = 0.0
    ncut = np.where(frac > 0, cut.sum(axis=1), 0)
    one = np.flatnonzero(ncut == 1)
    if one.size:
        l = np.argmax(cut[one], axis=1)
        frac[one] = _single_halfplane(D[one, l], E[one, l], hw)
    for i in np.flatnonzero(ncut > 1):
        ls = np.flatnonzero(cut[i])
        frac[i] = _multi_halfplane(D[i, ls], E[i, ls], hw)
    return frac


def cell_fractions(B, G, hw, tie=1e-12):
    """(N, M) matrix of per-node cell fractions; rows sum to one."""
    B = np.ascontiguousarray(B, float)
    G = np.ascontiguousarray(G, float)
    hw = np.asarray(hw, float)
    out = np.empty(B.shape)
    for j in range(B.shape[1]):
        out[:, j] = _fractions_for(B, G, hw, j, tie)
    return out


def atom_mass(B, G, hw, mass, j, tie=1e-12):
    """``sum_i mass_i * fraction_ij`` for a single atom ``j``."""
    B = np.asarray(B, float)
    # only nodes where j can win somewhere in the cell contribute
    G = np.asarray(G, float)
    hw = np.asarray(hw, float)
    reach = np.abs(G[:, j:j + 1, :] - G) @ hw
    rows = np.flatnonzero(np.all(B[:, j:j + 1] - B - reach <= tie, axis=1))
    if rows.size == 0:
        return 0.0
    return float(np.dot(np.asarray(mass)[rows], _fractions_for(B, G, hw, j, tie, rows)))


def nearest_atom(points, atoms):
    d = np.sum((np.asarray(points)[:, None, :] - np.asarray(atoms)[None]) ** 2, axis=-1)
    return np.argmin(d, axis=1)
