"""Abstract constraint ``u + phi(x, y, s) <= 0`` and its numerical checks.

Every evaluator is vectorised over a leading batch: ``x`` has shape
``(..., n)`` (chart coordinates), ``y`` shape ``(..., m)`` and ``s`` shape
``(...)``; the batch shapes broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

FD_STEP = 1e-6
SOLVE_MAXITER = 200


class InvalidPoint(ValueError):
    """Raised when an evaluator is called outside the family's validity region."""


class OutsideDualDomain(ValueError):
    """``t + phi(x, y, .)`` has no sign change inside the admissible s-range."""


class Bundle(NamedTuple):
    phi: np.ndarray
    phi_s: np.ndarray
    phi_x: np.ndarray
    phi_y: np.ndarray


def _bcast(x, y, s):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    s = np.asarray(s, float)
    batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1], s.shape)
    return (np.broadcast_to(x, batch + x.shape[-1:]),
            np.broadcast_to(y, batch + y.shape[-1:]),
            np.broadcast_to(s, batch))


class ConstraintFamily:
    """Base class for a constraint family.

    Subclasses implement ``phi``, ``phi_s``, ``phi_x``, ``valid`` and
    ``s_bounds``; the remaining derivatives fall back to central differences
    of the closed-form first derivatives.
    """

    identifier = "abstract"
    point_source = False  # x lives on a sphere-cap chart
    linear_in_s = False
    optics: str | None = None
    snell_ratio: float | None = None
    fd_second = 2e-5

    def __init__(self, **params):
        self.params = dict(params)

    def __repr__(self):
        return f"{type(self).__name__}({self.identifier!r}, {self.params})"

    # -- required ---------------------------------------------------------
    def phi(self, x, y, s):
        raise NotImplementedError

    def phi_s(self, x, y, s):
        raise NotImplementedError

    def phi_x(self, x, y, s):
        raise NotImplementedError

    def valid(self, x, y, s) -> np.ndarray:
        raise NotImplementedError

    def s_bounds(self, x, y):
        """Open interval of admissible s (entries may be infinite)."""
        x, y, _ = _bcast(x, y, 0.0)
        shape = x.shape[:-1]
        return np.full(shape, -np.inf), np.full(shape, np.inf)

    def target_dim(self, n: int) -> int:
        return n + 1 if self.point_source else n

    # -- optional closed forms --------------------------------------------
    def phi_y(self, x, y, s):
        return self._fd(lambda yy: self.phi(x, yy, s), y)

    def phi_xx(self, x, y, s):
        return self._fd2(lambda xx: self.phi_x(xx, y, s), x)

    def phi_xy(self, x, y, s):
        """Matrix ``d phi_x[k] / d y[l]``."""
        return self._fd2(lambda yy: self.phi_x(x, yy, s), y)

    def phi_xs(self, x, y, s):
        s = np.asarray(s, float)
        return self._fd2(lambda ss: self.phi_x(x, y, ss[..., 0]), s[..., None])[..., 0]

    def closed_solve(self, x, y, t):
        """Exact root of ``t + phi = 0`` if the family has one, else ``None``."""
        return None

    def s_guess(self, x, y, t):
        lo, hi = self.s_bounds(x, y)
        with np.errstate(invalid="ignore"):
            mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), 0.0)
            mid = np.where(np.isfinite(lo) & ~np.isfinite(hi), lo + 1.0, mid)
            return np.where(~np.isfinite(lo) & np.isfinite(hi), hi - 1.0, mid)

    def theta0(self) -> float:
        """Positive lower bound of phi_s on the sampling region."""
        x, y, s = self.sample(np.random.default_rng(12345), 400)
        return 0.5 * float(np.min(self.phi_s(x, y, s)))

    def propose(self, rng, k: int):
        """Candidate (x, y, s) triples for sampling checks."""
        raise NotImplementedError

    def sample(self, rng, count: int, max_rounds: int = 50):
        """``count`` valid samples by rejection from :meth:`propose`."""
        got = [], [], []
        have = 0
        for _ in range(max_rounds):
            x, y, s = self.propose(rng, max(4 * count, 16))
            ok = self.valid(x, y, s)
            for buf, arr in zip(got, (x, y, s)):
                buf.append(arr[ok])
            have += int(ok.sum())
            if have >= count:
                break
        if have < count:
            raise InvalidPoint(f"{self.identifier}: only {have} valid samples found")
        return tuple(np.concatenate(b)[:count] for b in got)

    # -- helpers ----------------------------------------------------------
    @staticmethod
    def _fd(fn, z, h=FD_STEP):
        """Central differences of ``fn`` along the last axis of ``z``."""
        z = np.asarray(z, float)
        cols = []
        for k in range(z.shape[-1]):
            e = np.zeros(z.shape[-1])
            e[k] = h
            cols.append((np.asarray(fn(z + e)) - np.asarray(fn(z - e))) / (2 * h))
        return np.stack(cols, axis=-1)

    def _fd2(self, fn, z):
        # Richardson-refined differences of a closed-form first derivative
        h = self.fd_second
        return (4 * self._fd(fn, z, h / 2) - self._fd(fn, z, h)) / 3

    def branch(self, x, y, s):
        """Value and chart gradient of the branch ``-phi(., y, s)``."""
        return -self.phi(x, y, s), -self.phi_x(x, y, s)


def require_valid(family: ConstraintFamily, x, y, s, where="evaluate"):
    ok = np.asarray(family.valid(x, y, s))
    if not np.all(ok):
        bad = np.argwhere(~np.atleast_1d(ok))[0]
        raise InvalidPoint(f"{family.identifier}: invalid (x, y, s) in {where} at batch index {tuple(bad)}")


def evaluate(family: ConstraintFamily, x, y, s) -> Bundle:
    require_valid(family, x, y, s)
    return Bundle(family.phi(x, y, s), family.phi_s(x, y, s), family.phi_x(x, y, s), family.phi_y(x, y, s))


# -- monotone root solve ------------------------------------------------------

def _expand(family, x, y, t, s, bound, direction, want_sign):
    """Push ``s`` toward ``bound`` until ``sign(t + phi) == want_sign``."""
    step = np.ones_like(s)
    for _ in range(120):
        with np.errstate(all="ignore"):
            g = t + family.phi(x, y, s)
        bad = ~(np.sign(g) == want_sign) & ~(g == 0)
        if not bad.any():
            break
        fin = np.isfinite(bound)
        with np.errstate(invalid="ignore"):
            moved = np.where(fin, bound + (s - bound) * 0.25, s + direction * step)
        s = np.where(bad, moved, s)
        step = np.where(bad, 2 * step, step)
    with np.errstate(all="ignore"):
        g = t + family.phi(x, y, s)
    return s, g


def solve_s(family: ConstraintFamily, x, y, t, *, beyond="raise", tol=1e-12):
    """Root ``s`` of ``t + phi(x, y, s) = 0`` (this is ``-phi*(x, y, t)``).

    ``beyond="inf"`` returns ``+inf`` where ``t + phi`` stays negative up to
    the top of the s-range (the constraint never binds there); otherwise a
    missing bracket raises :class:`OutsideDualDomain`.
    """
    x, y, t = _bcast(x, y, t)
    shape = t.shape
    x = x.reshape(-1, x.shape[-1])
    y = y.reshape(-1, y.shape[-1])
    t = t.ravel().copy()
    closed = family.closed_solve(x, y, t)
    if closed is not None:
        closed = np.asarray(closed, float)
        if np.any(np.isnan(closed)):
            raise OutsideDualDomain(f"{family.identifier}: t + phi > 0 over the whole s-range")
        if beyond != "inf" and not np.all(np.isfinite(closed)):
            raise OutsideDualDomain(f"{family.identifier}: t + phi < 0 over the whole s-range")
        return closed.reshape(shape)
    lo_b, hi_b = family.s_bounds(x, y)
    lo_b = np.broadcast_to(lo_b, t.shape).astype(float)
    hi_b = np.broadcast_to(hi_b, t.shape).astype(float)
    empty = ~(lo_b < hi_b)
    if empty.any():
        i = int(np.argmax(empty))
        raise OutsideDualDomain(f"{family.identifier}: empty s-range at node {i}")
    with np.errstate(invalid="ignore"):
        s0 = np.broadcast_to(family.s_guess(x, y, t), t.shape).astype(float)
        s0 = np.clip(s0, np.where(np.isfinite(lo_b), lo_b + 1e-9 * (1 + abs(lo_b)), -np.inf),
                     np.where(np.isfinite(hi_b), hi_b - 1e-9 * (1 + abs(hi_b)), np.inf))
    a, ga = _expand(family, x, y, t, s0.copy(), lo_b, -1.0, -1.0)
    b, gb = _expand(family, x, y, t, s0.copy(), hi_b, 1.0, 1.0)
    if np.any(~(ga <= 0)):
        i = int(np.argmax(~(ga <= 0)))
        raise OutsideDualDomain(f"{family.identifier}: t + phi > 0 over the whole s-range at node {i}")
    out = np.full(t.shape, np.inf)
    high = ~(gb >= 0)
    if high.any() and beyond != "inf":
        i = int(np.argmax(high))
        raise OutsideDualDomain(f"{family.identifier}: t + phi < 0 over the whole s-range at node {i}")
    act = np.flatnonzero(~high)
    a, b, ga, gb = a[act], b[act], ga[act], gb[act]
    xa, ya, ta = x[act], y[act], t[act]
    s = np.where(ga == 0, a, np.where(gb == 0, b, 0.5 * (a + b)))
    done = np.zeros(len(act), bool)
    for _ in range(SOLVE_MAXITER):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        si = s[idx]
        g = ta[idx] + family.phi(xa[idx], ya[idx], si)
        neg = g < 0
        a[idx] = np.where(neg, si, a[idx])
        b[idx] = np.where(neg, b[idx], si)
        with np.errstate(all="ignore"):
            step = g / family.phi_s(xa[idx], ya[idx], si)
        newton = si - step
        ok = np.isfinite(newton) & (newton >= a[idx]) & (newton <= b[idx])
        # stop on a small Newton step (the step itself is applied as a final polish)
        conv = ((g == 0) | (ok & (np.abs(step) <= tol * (1 + np.abs(si))))
                | (b[idx] - a[idx] <= 4 * np.spacing(np.abs(si) + 1)))
        nxt = np.where(ok, newton, 0.5 * (a[idx] + b[idx]))
        s[idx] = np.where(conv & ~ok, si, nxt)
        done[idx] = conv
    out[act] = s
    return out.reshape(shape)


# -- sampling checks ------------------------------------------------------------

@dataclass
class DerivativeReport:
    family: str
    samples: int
    max_error: dict = field(default_factory=dict)
    worst: dict = field(default_factory=dict)

    @property
    def worst_error(self) -> float:
        return max(self.max_error.values()) if self.max_error else 0.0

    def passed(self, tol=1e-6) -> bool:
        return self.worst_error <= tol

    def to_dict(self):
        return {"family": self.family, "samples": self.samples,
                "max_error": dict(self.max_error), "worst": {k: list(map(list, v)) if isinstance(v, tuple) else v
                                                             for k, v in self.worst.items()}}


def _richardson(fn, z, axis_len, h=FD_STEP):
    d1 = ConstraintFamily._fd(fn, z, h)
    d2 = ConstraintFamily._fd(fn, z, h / 2)
    return (4 * d2 - d1) / 3


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.abs(a), 1.0)


def check_derivatives(family: ConstraintFamily, sample_count: int, seed: int = 0) -> DerivativeReport:
    """Compare analytic derivatives with Richardson-refined central differences."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    x, y, s = family.sample(rng, sample_count)
    h = FD_STEP
    fd = {
        "phi_s": (4 * (family.phi(x, y, s + h / 2) - family.phi(x, y, s - h / 2)) / h
                  - (family.phi(x, y, s + h) - family.phi(x, y, s - h)) / (2 * h)) / 3,
        "phi_x": _richardson(lambda z: family.phi(z, y, s), x, x.shape[-1]),
        "phi_y": _richardson(lambda z: family.phi(x, z, s), y, y.shape[-1]),
        "phi_xx": _richardson(lambda z: family.phi_x(z, y, s), x, x.shape[-1]),
        "phi_xy": _richardson(lambda z: family.phi_x(x, z, s), y, y.shape[-1]),
        "phi_xs": (4 * (family.phi_x(x, y, s + h / 2) - family.phi_x(x, y, s - h / 2)) / h
                   - (family.phi_x(x, y, s + h) - family.phi_x(x, y, s - h)) / (2 * h)) / 3,
    }
    rep = DerivativeReport(family.identifier, len(s))
    for name, ref in fd.items():
        ana = np.asarray(getattr(family, name)(x, y, s), float)
        err = _rel(ana, ref).reshape(len(s), -1).max(axis=1)
        k = int(np.argmax(err))
        rep.max_error[name] = float(err[k])
        rep.worst[name] = {"x": x[k].tolist(), "y": y[k].tolist(), "s": float(s[k])}
    return rep


def h2_matrix(family, x, y, s):
    """``phi_xy - phi_xs (x) phi_y / phi_s`` (the H2 matrix)."""
    pxy = family.phi_xy(x, y, s)
    pxs = family.phi_xs(x, y, s)
    py = family.phi_y(x, y, s)
    ps = family.phi_s(x, y, s)
    n = pxy.shape[-2]
    # point-source targets: only the in-plane target coordinates enter
    py = py[..., :n]
    pxy = pxy[..., :n]
    return pxy - pxs[..., :, None] * py[..., None, :] / ps[..., None, None]


def _sample_with(family, rng, count, s_range=None, max_dist=None):
    if s_range is None and max_dist is None:
        return family.sample(rng, count)
    xs, ys, ss, have = [], [], [], 0
    for _ in range(200):
        x, y, s = family.sample(rng, count)
        if s_range is not None:
            s = rng.uniform(*s_range, size=len(s))
        ok = family.valid(x, y, s)
        if max_dist is not None:
            ok &= np.linalg.norm(x - y[..., : x.shape[-1]], axis=-1) <= max_dist
        xs.append(x[ok]), ys.append(y[ok]), ss.append(s[ok])
        have += int(ok.sum())
        if have >= count:
            break
    if have < count:
        raise InvalidPoint(f"{family.identifier}: not enough valid samples in the requested region")
    return tuple(np.concatenate(a)[:count] for a in (xs, ys, ss))


def check_H2(family, sample_count: int, seed: int = 0, *, s_range=None, max_dist=None):
    """Sampled minimum of ``|det(H2 matrix)|`` and where it occurs."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    x, y, s = _sample_with(family, np.random.default_rng(seed), sample_count, s_range, max_dist)
    det = np.abs(np.linalg.det(h2_matrix(family, x, y, s)))
    k = int(np.argmin(det))
    return float(det[k]), {"x": x[k].tolist(), "y": y[k].tolist(), "s": float(s[k])}


def check_monotonicity(family, sample_count: int, seed: int = 0, *, s_range=None, max_dist=None):
    """Sampled minimum of ``phi_s``; ``ok`` is ``min >= theta0``."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    x, y, s = _sample_with(family, np.random.default_rng(seed), sample_count, s_range, max_dist)
    ps = family.phi_s(x, y, s)
    k = int(np.argmin(ps))
    return float(ps[k]), bool(ps[k] >= family.theta0() * (1 - 1e-12)), {"x": x[k].tolist(), "y": y[k].tolist(), "s": float(s[k])}
