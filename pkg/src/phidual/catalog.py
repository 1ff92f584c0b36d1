"""Concrete constraint families: transport costs and reflector/refractor surfaces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constraint import ConstraintFamily, _bcast

DEFAULT_KAPPA = 2.0 / 3.0
DEFAULT_H = 1.0
DEFAULT_DELTA0 = 0.1


class CatalogError(ValueError):
    pass


def _lift(x):
    w = np.sqrt(np.clip(1.0 - np.sum(x * x, axis=-1), 0.0, None))
    return np.concatenate([x, w[..., None]], axis=-1), w


def _chart(x, w, grad_X):
    """Pull a gradient in R^{n+1} back to sphere-cap chart coordinates."""
    n = x.shape[-1]
    return grad_X[..., :n] - (x / w[..., None]) * grad_X[..., n:n + 1]


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _cap_points(rng, k, n, radius):
    r = radius * np.sqrt(rng.uniform(size=k)) if n == 2 else radius * rng.uniform(-1, 1, size=k)
    if n == 1:
        return r[:, None]
    th = rng.uniform(0, 2 * np.pi, size=k)
    return np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)


# -- optimal transport ----------------------------------------------------------

class OTCost(ConstraintFamily):
    """``phi = s - c(x, y)`` for a transport cost ``c``.

    Far-field costs take ``x`` on the sphere-cap chart and ``y`` as chart
    coordinates lifted to the hemisphere selected by ``y_sign``.
    """

    identifier = "ot-cost"
    linear_in_s = True

    def __init__(self, cost="quadratic", kappa=DEFAULT_KAPPA, y_sign=None, **extra):
        if cost not in ("quadratic", "log-reflector", "log-refractor"):
            raise CatalogError(f"unknown cost {cost!r}")
        if cost == "log-refractor" and not (kappa > 0 and kappa != 1):
            raise CatalogError("log-refractor cost needs kappa > 0, kappa != 1")
        if y_sign is None:
            y_sign = -1.0 if cost == "log-reflector" else 1.0
        super().__init__(cost=cost, kappa=float(kappa), y_sign=float(y_sign), **extra)
        self.cost = cost
        self.kappa = float(kappa)
        self.y_sign = float(y_sign)
        self.point_source = cost != "quadratic"

    def target_dim(self, n):
        return n

    def _lift_y(self, y):
        w = np.sqrt(np.clip(1.0 - np.sum(y * y, axis=-1), 0.0, None))
        return np.concatenate([y, self.y_sign * w[..., None]], axis=-1)

    def _t(self, x, y):
        X, w = _lift(x)
        return X, w, _dot(X, self._lift_y(y))

    def c(self, x, y):
        x, y, _ = _bcast(x, y, 0.0)
        if self.cost == "quadratic":
            return 0.5 * np.sum((x - y) ** 2, axis=-1)
        _, _, t = self._t(x, y)
        with np.errstate(invalid="ignore", divide="ignore"):
            if self.cost == "log-reflector":
                return -np.log(1.0 - t)
            if self.kappa < 1:
                return -np.log(1.0 - self.kappa * t)
            return np.log(self.kappa * t - 1.0)

    def _c_t(self, t):
        if self.cost == "log-reflector":
            return 1.0 / (1.0 - t)
        if self.kappa < 1:
            return self.kappa / (1.0 - self.kappa * t)
        return self.kappa / (self.kappa * t - 1.0)

    def phi(self, x, y, s):
        return np.asarray(s, float) - self.c(x, y)

    def phi_s(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return np.ones(s.shape)

    def phi_x(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        if self.cost == "quadratic":
            return -(x - y)
        X, w, t = self._t(x, y)
        return -_chart(x, w, self._c_t(t)[..., None] * self._lift_y(y))

    def phi_y(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        if self.cost == "quadratic":
            return x - y
        return super().phi_y(x, y, s)

    def phi_xx(self, x, y, s):
        if self.cost == "quadratic":
            x, y, s = _bcast(x, y, s)
            return -np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy()
        return super().phi_xx(x, y, s)

    def phi_xy(self, x, y, s):
        if self.cost == "quadratic":
            x, y, s = _bcast(x, y, s)
            return np.broadcast_to(np.eye(x.shape[-1]), x.shape + (x.shape[-1],)).copy()
        return super().phi_xy(x, y, s)

    def phi_xs(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return np.zeros(x.shape)

    def valid(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        ok = np.isfinite(s) & np.all(np.isfinite(x), axis=-1) & np.all(np.isfinite(y), axis=-1)
        if self.cost == "quadratic":
            return ok
        ok &= (np.sum(x * x, axis=-1) < 1) & (np.sum(y * y, axis=-1) <= 1)
        _, _, t = self._t(x, y)
        if self.cost == "log-reflector":
            return ok & (1.0 - t > 0)
        arg = 1.0 - self.kappa * t if self.kappa < 1 else self.kappa * t - 1.0
        return ok & (arg > 0)

    def closed_solve(self, x, y, t):
        return self.c(x, y) - np.asarray(t, float)

    def theta0(self):
        return 1.0

    def propose(self, rng, k):
        n = int(self.params.get("dimension", 2))
        if self.cost == "quadratic":
            return rng.uniform(-1, 1, (k, n)), rng.uniform(-1, 1, (k, n)), rng.uniform(-2, 2, k)
        return _cap_points(rng, k, n, 0.6), _cap_points(rng, k, n, 0.8), rng.uniform(-2, 2, k)


# -- near-field reflector, point source --------------------------------------------

class ReflectorNFPoint(ConstraintFamily):
    """Supporting ellipsoids with one focus at the origin and one at ``Y``.

    ``phi = s + log(1 - X.Y / (e^{-s} + sqrt(|Y|^2 + e^{-2s})))`` with ``X``
    the lifted chart point; ``-phi`` is the log of the ellipsoid's radial
    function with focal parameter ``p = e^{-s}``.
    """

    identifier = "reflector-nf-point"
    point_source = True
    optics = "reflector-point"

    def __init__(self, delta0=DEFAULT_DELTA0, **extra):
        if not 0 < delta0 < 2:
            raise CatalogError("delta0 must lie in (0, 2)")
        super().__init__(delta0=float(delta0), **extra)
        self.delta0 = float(delta0)

    def _parts(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        X, w = _lift(x)
        t = _dot(X, y)
        nY2 = _dot(y, y)
        pos = s >= 0
        # split by sign of s so that no exponential overflows
        q = np.exp(-np.where(pos, s, 0.0))
        r = np.exp(np.where(pos, 0.0, s))
        R = np.sqrt(nY2 + q * q)
        root = np.sqrt(1.0 + nY2 * r * r)
        invD = np.where(pos, 1.0 / (q + R), r / (1.0 + root))
        q_over_R = np.where(pos, q / R, 1.0 / root)
        z = t * invD
        return x, y, s, X, w, t, invD, q_over_R, z

    def phi(self, x, y, s):
        x, y, s, X, w, t, invD, qR, z = self._parts(x, y, s)
        with np.errstate(invalid="ignore", divide="ignore"):
            return s + np.log1p(-z)

    def phi_s(self, x, y, s):
        *_, qR, z = self._parts(x, y, s)
        return 1.0 - qR * z / (1.0 - z)

    def dphi_dt(self, x, y, s):
        *_, invD, qR, z = self._parts(x, y, s)
        return -invD / (1.0 - z)

    def phi_x(self, x, y, s):
        x, y, s, X, w, t, invD, qR, z = self._parts(x, y, s)
        return _chart(x, w, (-invD / (1.0 - z))[..., None] * y)

    def valid(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        nY = np.linalg.norm(y, axis=-1)
        ok = np.isfinite(s) & (nY > 0) & (np.sum(x * x, axis=-1) < 1)
        X, _ = _lift(x)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = _dot(X, y) / nY
        return ok & (c >= -1) & (c <= 1 - self.delta0)

    def s_guess(self, x, y, t):
        x, y, t = _bcast(x, y, t)
        return -np.array(t, float)

    def propose(self, rng, k):
        n = int(self.params.get("dimension", 2))
        x = _cap_points(rng, k, n, 0.6)
        y = np.concatenate([rng.uniform(-1.5, 1.5, (k, n)), rng.uniform(-2, 2, (k, 1))], axis=-1)
        return x, y, rng.uniform(-2, 2, k)

    def ellipsoid_rho(self, x, Y, s):
        """Radial function ``p / (1 - eps <X, Y/|Y|>)`` with ``p = e^{-s}``."""
        X, _ = _lift(np.asarray(x, float))
        Y = np.asarray(Y, float)
        nY = np.linalg.norm(Y, axis=-1)
        p = np.exp(-np.asarray(s, float))
        eps = np.sqrt(1 + p**2 / nY**2) - p / nY
        return p / (1 - eps * _dot(X, Y) / nY)


# -- near-field reflector, parallel source --------------------------------------

class ReflectorNFParallel(ConstraintFamily):
    """Supporting paraboloids ``u = 1/(2s) - (s/2)|x - y|^2`` focusing at ``(y, 0)``."""

    identifier = "reflector-nf-parallel"
    optics = "reflector-parallel"

    def __init__(self, s_max=4.0, **extra):
        if not s_max > 0:
            raise CatalogError("s_max must be positive")
        super().__init__(s_max=float(s_max), **extra)
        self.s_max = float(s_max)

    def phi(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        with np.errstate(divide="ignore"):
            return -0.5 / s + 0.5 * s * np.sum((x - y) ** 2, axis=-1)

    def phi_s(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return 0.5 / s**2 + 0.5 * np.sum((x - y) ** 2, axis=-1)

    def phi_x(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return s[..., None] * (x - y)

    def phi_y(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return -s[..., None] * (x - y)

    def phi_xx(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return s[..., None, None] * np.eye(x.shape[-1])

    def phi_xy(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return -s[..., None, None] * np.eye(x.shape[-1])

    def phi_xs(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return x - y

    def valid(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return (s > 0) & np.isfinite(s) & np.all(np.isfinite(x), -1) & np.all(np.isfinite(y), -1)

    def s_bounds(self, x, y):
        x, y, _ = _bcast(x, y, 0.0)
        return np.zeros(x.shape[:-1]), np.full(x.shape[:-1], np.inf)

    def closed_solve(self, x, y, t):
        x, y, t = _bcast(x, y, t)
        d2 = np.sum((x - y) ** 2, axis=-1)
        root = np.sqrt(t * t + d2)
        with np.errstate(divide="ignore", invalid="ignore"):
            # d2 s^2 + 2 t s - 1 = 0, positive root in a cancellation-free form
            s = np.where(t >= 0, 1.0 / (t + root), (root - t) / d2)
        return np.where((d2 == 0) & (t <= 0), np.inf, s)

    def theta0(self):
        return 0.5 / self.s_max**2

    def propose(self, rng, k):
        n = int(self.params.get("dimension", 2))
        return rng.uniform(-1, 1, (k, n)), rng.uniform(-1, 1, (k, n)), rng.uniform(0.25, self.s_max, k)


# -- near-field refractor, point source -------------------------------------------

class RefractorNFPoint(ConstraintFamily):
    """Cartesian ovals refracting rays from the origin into ``Y``.

    ``phi = -log rho`` where ``rho`` is the oval's radial function.  For
    ``kappa < 1`` the focal parameter is ``p = e^{-s}``; for ``kappa > 1`` it
    is ``p = e^{s}``, which keeps ``phi`` increasing in ``s``.
    """

    identifier = "refractor-nf-point"
    point_source = True
    optics = "refractor-point"

    def __init__(self, kappa=DEFAULT_KAPPA, regime="lt1", tau=0.05, **extra):
        if regime not in ("lt1", "gt1"):
            raise CatalogError("regime must be 'lt1' or 'gt1'")
        if regime == "lt1":
            if not 0 < kappa < 1:
                raise CatalogError(f"kappa={kappa} invalid: this refractor family needs 0 < kappa < 1")
            if not 0 < tau < 1 - kappa:
                raise CatalogError("tau must lie in (0, 1 - kappa)")
        else:
            if not kappa > 1:
                raise CatalogError(f"kappa={kappa} invalid: the kappa > 1 variant needs kappa > 1")
            if not 0 < tau < 1 - 1 / kappa:
                raise CatalogError("tau must lie in (0, 1 - 1/kappa)")
        super().__init__(kappa=float(kappa), regime=regime, tau=float(tau), **extra)
        self.kappa, self.regime, self.tau = float(kappa), regime, float(tau)
        self.snell_ratio = self.kappa  # n2 / n1

    def _parts(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        k2 = self.kappa**2
        X, w = _lift(x)
        t = _dot(X, y)
        nY2 = _dot(y, y)
        with np.errstate(all="ignore"):
            if self.regime == "lt1":
                p = np.exp(-s)
                A = p - k2 * t
                disc = k2 * ((p - t) ** 2 + (1 - k2) * (nY2 - t * t))
                sq = np.sqrt(disc)
                rho = (p * p - k2 * nY2) / (A + sq)
            else:
                p = np.exp(s)
                B = k2 * t - p
                disc = k2 * ((p - t) ** 2 + (k2 - 1) * (t * t - nY2))
                sq = np.sqrt(disc)
                rho = (k2 * nY2 - p * p) / (B + sq)
        return x, y, s, X, w, t, nY2, p, sq, rho

    def rho(self, x, y, s):
        return self._parts(x, y, s)[-1]

    def phi(self, x, y, s):
        with np.errstate(all="ignore"):
            return -np.log(self.rho(x, y, s))

    def phi_s(self, x, y, s):
        *_, p, sq, rho = self._parts(x, y, s)
        return p * (p - rho) / (rho * sq)

    def _grad_X(self, x, y, s):
        x, y, s, X, w, t, nY2, p, sq, rho = self._parts(x, y, s)
        k2 = self.kappa**2
        sign = -1.0 if self.regime == "lt1" else 1.0
        phi_t = sign * k2 / sq
        phi_n = -sign * k2 / (2 * rho * sq)  # d phi / d |Y|^2
        return x, y, X, w, phi_t, phi_n

    def phi_x(self, x, y, s):
        x, y, X, w, phi_t, _ = self._grad_X(x, y, s)
        return _chart(x, w, phi_t[..., None] * y)

    def phi_y(self, x, y, s):
        x, y, X, w, phi_t, phi_n = self._grad_X(x, y, s)
        return phi_t[..., None] * X + 2 * phi_n[..., None] * y

    def s_bounds(self, x, y):
        x, y, _ = _bcast(x, y, 0.0)
        X, _ = _lift(x)
        t = _dot(X, y)
        nY = np.linalg.norm(y, axis=-1)
        k = self.kappa
        with np.errstate(all="ignore"):
            if self.regime == "lt1":
                return -np.log(np.minimum(nY, t)), -np.log(k * nY)
            w = np.sqrt(np.clip((k * k - 1) * (nY**2 - t * t), 0, None))
            return np.log(np.maximum(nY, t + w)), np.log(np.minimum(k * nY, k * k * t))

    def valid(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        X, _ = _lift(x)
        t = _dot(X, y)
        nY = np.linalg.norm(y, axis=-1)
        k = self.kappa
        ok = np.isfinite(s) & (nY > 0) & (np.sum(x * x, axis=-1) < 1)
        with np.errstate(all="ignore"):
            if self.regime == "lt1":
                p = np.exp(-s)
                ok &= (k * nY < p) & (p < nY) & (p <= t) & (t >= (k + self.tau) * nY)
            else:
                p = np.exp(s)
                edge = (p + np.sqrt(np.clip((k * k - 1) * (k * k * nY**2 - p * p), 0, None))) / (k * k)
                ok &= (nY < p) & (p < k * nY) & (t > edge) & (t >= (1 / k + self.tau) * nY)
            ok &= self.rho(x, y, s) > 0
        return ok

    def propose(self, rng, k):
        n = int(self.params.get("dimension", 2))
        x = _cap_points(rng, k, n, 0.4)
        y = np.concatenate([rng.uniform(-0.4, 0.4, (k, n)), rng.uniform(1.5, 3.0, (k, 1))], axis=-1)
        lo, hi = self.s_bounds(x, y)
        with np.errstate(invalid="ignore"):
            s = lo + (hi - lo) * rng.uniform(0.02, 0.98, k)
        return x, y, np.where(np.isfinite(s), s, 0.0)


# -- near-field refractor, parallel source ----------------------------------------

class RefractorNFParallel(ConstraintFamily):
    """Inverse ellipsoids: vertical rays are refracted into ``(y, h)``.

    ``phi = kappa s/(1-kappa^2) + sqrt(s^2/(1-kappa^2)^2 - |x-y|^2/(1-kappa^2)) - h``
    with ``kappa = n1/n2 < 1``.
    """

    identifier = "refractor-nf-parallel"
    optics = "refractor-parallel"

    def __init__(self, kappa=DEFAULT_KAPPA, h=DEFAULT_H, delta=0.5, **extra):
        if not 0 < kappa < 1:
            raise CatalogError(f"kappa={kappa} invalid: this refractor family needs 0 < kappa < 1")
        if not h > 0:
            raise CatalogError("h must be positive")
        if not 0 < delta < 1:
            raise CatalogError("delta must lie in (0, 1)")
        super().__init__(kappa=float(kappa), h=float(h), delta=float(delta), **extra)
        self.kappa, self.h, self.delta = float(kappa), float(h), float(delta)
        self.a = 1.0 / (1.0 - self.kappa**2)
        k = self.kappa
        self.s_lo = h * (1 - k * k) / k
        self.s_hi = h * (1 - k * k) * (1 + k) ** 2 / k**3
        self.radius = delta * h * np.sqrt(1 - k * k) / k
        self.snell_ratio = 1.0 / self.kappa  # n2 / n1

    def _S(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        d2 = np.sum((x - y) ** 2, axis=-1)
        with np.errstate(invalid="ignore"):
            return x, y, s, np.sqrt(self.a**2 * s * s - self.a * d2)

    def phi(self, x, y, s):
        x, y, s, S = self._S(x, y, s)
        return self.kappa * self.a * s + S - self.h

    def phi_s(self, x, y, s):
        x, y, s, S = self._S(x, y, s)
        return self.kappa * self.a + self.a**2 * s / S

    def phi_x(self, x, y, s):
        x, y, s, S = self._S(x, y, s)
        return -self.a * (x - y) / S[..., None]

    def phi_y(self, x, y, s):
        x, y, s, S = self._S(x, y, s)
        return self.a * (x - y) / S[..., None]

    def valid(self, x, y, s):
        x, y, s, S = self._S(x, y, s)
        d = np.linalg.norm(x - y, axis=-1)
        return (s >= self.s_lo) & (s <= self.s_hi) & (S > 0) & (d <= self.radius)

    def s_bounds(self, x, y):
        x, y, _ = _bcast(x, y, 0.0)
        shape = x.shape[:-1]
        return np.full(shape, self.s_lo), np.full(shape, self.s_hi)

    def theta0(self):
        return self.kappa * self.a

    def propose(self, rng, k):
        n = int(self.params.get("dimension", 2))
        x = rng.uniform(-0.5, 0.5, (k, n))
        y = x + _cap_points(rng, k, n, self.radius)
        return x, y, rng.uniform(self.s_lo, self.s_hi, k)


# -- table-defined costs (discrete instances) ----------------------------------------

class MatrixCostFamily(ConstraintFamily):
    """``phi = s - C[i, j]`` where ``x = (i,)`` and ``y = (j,)`` are index coordinates."""

    identifier = "table"
    linear_in_s = True

    def __init__(self, cost, **extra):
        self.C = np.asarray(cost, float)
        if self.C.ndim != 2:
            raise CatalogError("cost table must be two-dimensional")
        super().__init__(**extra)
        self.params["cost"] = self.C.tolist()

    def _c(self, x, y):
        i = np.rint(np.asarray(x)[..., 0]).astype(int)
        j = np.rint(np.asarray(y)[..., 0]).astype(int)
        return self.C[i, j]

    def phi(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        return s - self._c(x, y)

    def phi_s(self, x, y, s):
        return np.ones(_bcast(x, y, s)[2].shape)

    def phi_x(self, x, y, s):
        return np.zeros(_bcast(x, y, s)[0].shape)

    def phi_y(self, x, y, s):
        return np.zeros(_bcast(x, y, s)[1].shape)

    def valid(self, x, y, s):
        x, y, s = _bcast(x, y, s)
        i = np.rint(x[..., 0])
        j = np.rint(y[..., 0])
        return np.isfinite(s) & (i >= 0) & (i < self.C.shape[0]) & (j >= 0) & (j < self.C.shape[1])

    def closed_solve(self, x, y, t):
        return self._c(*_bcast(x, y, t)[:2]) - np.asarray(t, float)

    def theta0(self):
        return 1.0

    def propose(self, rng, k):
        i = rng.integers(0, self.C.shape[0], k)[:, None].astype(float)
        j = rng.integers(0, self.C.shape[1], k)[:, None].astype(float)
        return i, j, rng.uniform(-2, 2, k)


# -- registry ---------------------------------------------------------------------

FAMILY_IDS = ("ot-cost", "reflector-ff", "refractor-ff", "reflector-nf-point",
              "reflector-nf-parallel", "refractor-nf-point", "refractor-nf-parallel")

_REGISTRY: dict[str, Callable[..., ConstraintFamily]] = {
    "ot-cost": OTCost,
    "reflector-ff": lambda **kw: _alias(OTCost, "reflector-ff", cost="log-reflector", **kw),
    "refractor-ff": lambda **kw: _alias(OTCost, "refractor-ff", cost="log-refractor", **kw),
    "reflector-nf-point": ReflectorNFPoint,
    "reflector-nf-parallel": ReflectorNFParallel,
    "refractor-nf-point": RefractorNFPoint,
    "refractor-nf-parallel": RefractorNFParallel,
    "table": MatrixCostFamily,
}


def _alias(cls, ident, **kw):
    fam = cls(**kw)
    fam.identifier = ident
    return fam


def register(identifier: str, factory: Callable[..., ConstraintFamily]):
    """Add a family factory (used by tests for deliberately broken families)."""
    _REGISTRY[identifier] = factory


def unregister(identifier: str):
    _REGISTRY.pop(identifier, None)


def known_families():
    return sorted(_REGISTRY)


@dataclass(frozen=True)
class CatalogEntry:
    identifier: str
    params: dict = field(default_factory=dict)

    @property
    def chart_kind(self) -> str:
        """Chart the family's x-coordinates live on."""
        if self.identifier in ("reflector-nf-point", "refractor-nf-point", "reflector-ff", "refractor-ff"):
            return "sphere-cap"
        if self.identifier == "ot-cost" and self.params.get("cost", "quadratic") != "quadratic":
            return "sphere-cap"
        return "plane"


def make_family(entry: CatalogEntry | str, **params) -> ConstraintFamily:
    if isinstance(entry, str):
        entry = CatalogEntry(entry, params)
    if entry.identifier not in _REGISTRY:
        raise CatalogError(f"unknown family {entry.identifier!r}; known: {known_families()}")
    try:
        return _REGISTRY[entry.identifier](**dict(entry.params))
    except TypeError as exc:
        raise CatalogError(f"bad parameters for {entry.identifier}: {exc}") from None


def validity(entry: CatalogEntry | ConstraintFamily, x, y, s) -> np.ndarray:
    fam = entry if isinstance(entry, ConstraintFamily) else make_family(entry)
    return np.asarray(fam.valid(x, y, s))
