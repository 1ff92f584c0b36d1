"""Lagrangian duality on finite instances.

A finite instance replaces the continuum problem by finitely many points
``x_i``, ``y_j`` with weights ``omega_ij > 0`` and a compact value box.  The
primal value is ``I* = sup {I(u, v) : psi(u, v) >= 0}`` and the dual is
``J* = inf_{mu >= 0} J(mu)`` with ``J(mu) = sup_box I + mu * psi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .catalog import CatalogError, make_family
from .constraint import ConstraintFamily

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


# -- objectives -------------------------------------------------------------------

class Objective:
    """``F(x_i, y_j, t, s)`` evaluated on the (I, J) lattice of pairs."""

    name = "abstract"
    strictly_concave = False

    def __init__(self, **params):
        self.params = params

    def concave(self, family) -> bool:
        return True

    def evaluate(self, T, S, Phi, Phis):
        """Return ``(F, F_t, F_s)`` arrays of shape (I, J)."""
        raise NotImplementedError

    def to_dict(self):
        return {"name": self.name, "params": {k: np.asarray(v).tolist() for k, v in self.params.items()}}


class LinearObjective(Objective):
    """``F = a_i t + b_j s``."""

    name = "linear"

    def __init__(self, a, b):
        super().__init__(a=np.asarray(a, float), b=np.asarray(b, float))

    def evaluate(self, T, S, Phi, Phis):
        a, b = self.params["a"][:, None], self.params["b"][None, :]
        return a * T + b * S, np.broadcast_to(a, T.shape), np.broadcast_to(b, S.shape)


class SeparableObjective(Objective):
    """``F = f_i t + g_j phi(x_i, y_j, s)``."""

    name = "separable"

    def __init__(self, f, g):
        super().__init__(f=np.asarray(f, float), g=np.asarray(g, float))

    def concave(self, family):
        # g phi is concave in s only when phi is affine in s
        return bool(family.linear_in_s) or bool(np.all(self.params["g"] == 0))

    def evaluate(self, T, S, Phi, Phis):
        f, g = self.params["f"][:, None], self.params["g"][None, :]
        return f * T + g * Phi, np.broadcast_to(f, T.shape), g * Phis


class QuadraticObjective(Objective):
    """``F = a_i t + b_j s - c/2 ((t - t0)^2 + (s - s0)^2)`` with ``c > 0``."""

    name = "quadratic-concave"
    strictly_concave = True

    def __init__(self, a, b, c=1.0, t0=0.0, s0=0.0):
        if c <= 0:
            raise ValueError("quadratic-concave objective needs c > 0")
        super().__init__(a=np.asarray(a, float), b=np.asarray(b, float), c=float(c),
                         t0=float(t0), s0=float(s0))

    def evaluate(self, T, S, Phi, Phis):
        p = self.params
        a, b, c = p["a"][:, None], p["b"][None, :], p["c"]
        dt, ds = T - p["t0"], S - p["s0"]
        F = a * T + b * S - 0.5 * c * (dt ** 2 + ds ** 2)
        return F, a - c * dt, b - c * ds


OBJECTIVES = {cls.name: cls for cls in (LinearObjective, SeparableObjective, QuadraticObjective)}


def make_objective(spec) -> Objective:
    if isinstance(spec, Objective):
        return spec
    name = spec.get("name")
    if name not in OBJECTIVES:
        raise ValueError(f"unknown objective {name!r}; known: {sorted(OBJECTIVES)}")
    return OBJECTIVES[name](**spec.get("params", {}))


# -- instances -----------------------------------------------------------------------

@dataclass
class FiniteInstance:
    x: np.ndarray
    y: np.ndarray
    omega: np.ndarray
    objective: Objective
    family: ConstraintFamily
    t_box: tuple
    s_box: tuple
    declared: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, float).reshape(len(self.x), -1)
        self.y = np.asarray(self.y, float).reshape(len(self.y), -1)
        self.omega = np.asarray(self.omega, float)
        if self.omega.shape != (len(self.x), len(self.y)):
            raise ValueError(f"omega must have shape {(len(self.x), len(self.y))}")
        if not np.all(self.omega > 0):
            raise ValueError("omega must be strictly positive")
        self.t_box = (float(self.t_box[0]), float(self.t_box[1]))
        self.s_box = (float(self.s_box[0]), float(self.s_box[1]))
        if self.t_box[0] > self.t_box[1] or self.s_box[0] > self.s_box[1]:
            raise ValueError("empty value box")
        # pair grids reused by every evaluation
        self._X = np.repeat(self.x[:, None, :], len(self.y), axis=1)
        self._Y = np.repeat(self.y[None, :, :], len(self.x), axis=0)

    @property
    def shape(self):
        return self.omega.shape

    @property
    def nvar(self):
        return sum(self.shape)

    def split(self, z):
        z = np.asarray(z, float)
        return z[:self.shape[0]], z[self.shape[0]:self.nvar]

    def lower_corner(self):
        I, J = self.shape
        return np.full(I, self.t_box[0]), np.full(J, self.s_box[0])

    def bounds(self):
        I, J = self.shape
        return [self.t_box] * I + [self.s_box] * J

    def phi_matrix(self, v):
        S = np.broadcast_to(np.asarray(v, float)[None, :], self.shape)
        return self.family.phi(self._X, self._Y, S), self.family.phi_s(self._X, self._Y, S)

    def terms(self, u, v):
        u, v = np.asarray(u, float), np.asarray(v, float)
        T = np.broadcast_to(u[:, None], self.shape)
        S = np.broadcast_to(v[None, :], self.shape)
        Phi, Phis = self.phi_matrix(v)
        F, Ft, Fs = self.objective.evaluate(T, S, Phi, Phis)
        return F, Ft, Fs, Phi, Phis

    # -- flags (declared and numerically checked) ---------------------------------------
    def convex_in_s(self, samples=9) -> bool:
        ss = np.linspace(self.s_box[0], self.s_box[1], samples)
        if len(ss) < 3 or ss[0] == ss[-1]:
            return True
        vals = np.stack([self.phi_matrix(np.full(self.shape[1], s))[0] for s in ss])
        return bool(np.all(vals[2:] - 2 * vals[1:-1] + vals[:-2] >= -1e-9))

    def flags(self) -> dict:
        conc = self.objective.concave(self.family)
        conv = self.convex_in_s()
        out = {
            "concave": bool(self.declared.get("concave", conc) and conc),
            "convex_in_s": bool(self.declared.get("convex_in_s", conv) and conv),
            "slater_margin": slater_margin(self),
        }
        out["slater"] = out["slater_margin"] > 0
        out["declared_mismatch"] = (bool(self.declared.get("concave", conc)) != conc
                                    or bool(self.declared.get("convex_in_s", conv)) != conv)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteInstance":
        try:
            fam_spec = d["family"]
            family = make_family(fam_spec["id"], **fam_spec.get("params", {}))
            if "x" in d:
                x = np.asarray(d["x"], float)
            else:
                x = np.arange(family.C.shape[0], dtype=float)[:, None]
            if "y" in d:
                y = np.asarray(d["y"], float)
            else:
                y = np.arange(family.C.shape[1], dtype=float)[:, None]
            x = x.reshape(len(x), -1)
            y = y.reshape(len(y), -1)
            omega = product_weights(len(x), len(y), d.get("omega", "uniform"))
            objective = make_objective(d["objective"])
            box = d["box"]
            return cls(x, y, omega, objective, family, tuple(box["t"]), tuple(box["s"]),
                       dict(d.get("flags", {})))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValueError(f"malformed duality instance: {exc!r}") from None
        except CatalogError:
            raise


def product_weights(nx, ny, spec="uniform"):
    """Pair weights: explicit matrix, ``"uniform"`` or ``{"w": [...], "g": [...]}``.

    The product form is ``omega_ij = w_i * g_j / sum(g)``.
    """
    if isinstance(spec, str):
        if spec != "uniform":
            raise ValueError(f"unknown omega spec {spec!r}")
        return np.full((nx, ny), 1.0 / (nx * ny))
    if isinstance(spec, dict):
        w = np.asarray(spec.get("w", np.full(nx, 1.0 / nx)), float)
        g = np.asarray(spec.get("g", np.ones(ny)), float)
        return np.outer(w, g / g.sum())
    return np.asarray(spec, float)


# -- values ---------------------------------------------------------------------------

def objective_value(inst: FiniteInstance, u, v) -> float:
    """``I(u, v) = sum_ij omega_ij F(x_i, y_j, u_i, v_j)``."""
    return float(np.sum(inst.omega * inst.terms(u, v)[0]))


def psi(inst: FiniteInstance, u, v) -> float:
    """``min_ij -(u_i + phi(x_i, y_j, v_j))``; nonnegative iff (u, v) is feasible."""
    Phi = inst.phi_matrix(v)[0]
    return float(np.min(-(np.asarray(u, float)[:, None] + Phi)))


def lagrangian(inst: FiniteInstance, u, v, mu) -> float:
    return objective_value(inst, u, v) + float(mu) * psi(inst, u, v)


def balance_residual(inst: FiniteInstance, u, v) -> float:
    """``sum_ij omega_ij (-F_t + F_s / phi_s)``."""
    _, Ft, Fs, _, Phis = inst.terms(u, v)
    return float(np.sum(inst.omega * (-Ft + Fs / Phis)))


def slater_margin(inst: FiniteInstance) -> float:
    """``max psi`` over the box, attained at the lower corner since phi_s > 0."""
    return psi(inst, *inst.lower_corner())


# -- inner maximisation -----------------------------------------------------------------

@dataclass
class InnerOptions:
    starts: int = 8
    seed: int = 0
    ftol: float = 1e-13
    maxiter: int = 500
    feas_tol: float = 1e-9


@dataclass
class InnerResult:
    value: float
    u: np.ndarray
    v: np.ndarray
    improved: bool
    message: str = ""


def _grad_I(inst, u, v):
    _, Ft, Fs, _, _ = inst.terms(u, v)
    return np.concatenate([np.sum(inst.omega * Ft, axis=1), np.sum(inst.omega * Fs, axis=0)])


def _starts(inst, opts, rng):
    lo = np.array([b[0] for b in inst.bounds()])
    hi = np.array([b[1] for b in inst.bounds()])
    pts = [lo.copy(), 0.5 * (lo + hi)]
    while len(pts) < opts.starts:
        pts.append(rng.uniform(lo, hi))
    return pts[:max(opts.starts, 1)]


def _psi_floor(inst):
    """A lower bound of psi over the box (phi increases in s)."""
    I, J = inst.shape
    Phi = inst.phi_matrix(np.full(J, inst.s_box[1]))[0]
    return float(np.min(-(inst.t_box[1] + Phi)))


def _epigraph(inst, mu, opts, feasible_only=False):
    """Maximise ``I + mu w`` subject to ``w <= -(u_i + phi_ij)`` over the box."""
    I, J = inst.shape
    nv = inst.nvar
    w_hi = slater_margin(inst) + 1.0
    w_lo = 0.0 if feasible_only else _psi_floor(inst) - 1.0
    bounds = inst.bounds() + [(w_lo, w_hi)]
    ii, jj = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()

    def fun(z):
        u, v = inst.split(z)
        return -(objective_value(inst, u, v) + mu * z[-1])

    def jac(z):
        u, v = inst.split(z)
        return -np.concatenate([_grad_I(inst, u, v), [mu]])

    def cons(z):
        u, v = inst.split(z)
        Phi = inst.phi_matrix(v)[0]
        return (-(u[:, None] + Phi) - z[-1]).ravel()

    def cons_jac(z):
        u, v = inst.split(z)
        Phis = inst.phi_matrix(v)[1]
        Jm = np.zeros((I * J, nv + 1))
        Jm[np.arange(I * J), ii] = -1.0
        Jm[np.arange(I * J), I + jj] = -Phis.ravel()
        Jm[:, -1] = -1.0
        return Jm

    rng = np.random.default_rng(opts.seed)
    best = None
    for z0 in _starts(inst, opts, rng):
        u0, v0 = inst.split(z0)
        w0 = np.clip(psi(inst, u0, v0), w_lo, w_hi)
        res = minimize(fun, np.append(z0, w0), jac=jac, bounds=bounds, method="SLSQP",
                       constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                       options={"ftol": opts.ftol, "maxiter": opts.maxiter})
        z = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
        u, v = inst.split(z)
        p = psi(inst, u, v)
        if feasible_only:
            if p < -opts.feas_tol:
                continue
            val = objective_value(inst, u, v)
        else:
            val = objective_value(inst, u, v) + mu * p
        if best is None or val > best.value:
            best = InnerResult(val, u.copy(), v.copy(), True, str(res.message))
    return best


def _negative_mu(inst, mu, opts):
    """``mu < 0``: ``L = I + |mu| max_ij (u_i + phi_ij)`` is a max of smooth pieces."""
    I, J = inst.shape
    m = -mu
    best = None
    rng = np.random.default_rng(opts.seed)
    for i in range(I):
        for j in range(J):
            def fun(z, i=i, j=j):
                u, v = inst.split(z)
                return -(objective_value(inst, u, v)
                         + m * (u[i] + inst.family.phi(inst.x[i], inst.y[j], v[j])))

            for z0 in _starts(inst, InnerOptions(starts=max(2, opts.starts // 2)), rng):
                res = minimize(fun, z0, bounds=inst.bounds(), method="L-BFGS-B")
                u, v = inst.split(res.x)
                val = lagrangian(inst, u, v, mu)
                if best is None or val > best.value:
                    best = InnerResult(val, u.copy(), v.copy(), True, str(res.message))
    return best


def _collapsed(inst):
    return inst.t_box[0] == inst.t_box[1] and inst.s_box[0] == inst.s_box[1]


def inner_maximize(inst: FiniteInstance, mu, options: InnerOptions | None = None) -> InnerResult:
    """Best point of ``L(., ., mu)`` over the box found by multi-start SLSQP."""
    opts = options or InnerOptions()
    if _collapsed(inst):
        u, v = inst.lower_corner()
        return InnerResult(lagrangian(inst, u, v, mu), u, v, True, "collapsed box")
    best = _epigraph(inst, float(mu), opts) if mu >= 0 else _negative_mu(inst, float(mu), opts)
    # report (but keep) a result that does not beat the lower corner
    u0, v0 = inst.lower_corner()
    base = lagrangian(inst, u0, v0, mu)
    if best is None or best.value < base - 1e-12:
        return InnerResult(base, u0, v0, False, "inner solver failed to improve on the lower corner")
    return best


def dual_J(inst: FiniteInstance, mu, options: InnerOptions | None = None) -> float:
    """``J(mu) = sup_box L(u, v, mu)``."""
    return inner_maximize(inst, mu, options).value


def primal_optimum(inst: FiniteInstance, options: InnerOptions | None = None) -> InnerResult:
    """``I* = sup {I : psi >= 0}`` over the box."""
    opts = options or InnerOptions()
    if _collapsed(inst):
        u, v = inst.lower_corner()
        ok = psi(inst, u, v) >= 0
        return InnerResult(objective_value(inst, u, v) if ok else -np.inf, u, v, ok, "collapsed box")
    res = _epigraph(inst, 0.0, opts, feasible_only=True)
    if res is None:
        u, v = inst.lower_corner()
        return InnerResult(-np.inf, u, v, False, "no feasible point found")
    return res


def golden_section(f, a, b, tol=1e-9, maxiter=200):
    """Minimiser of a unimodal ``f`` on ``[a, b]``; returns (x, f(x))."""
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxiter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


# -- experiments --------------------------------------------------------------------------

@dataclass
class GapReport:
    I_star: float
    J_star: float
    gap: float
    mu_star: float
    slackness: float
    slater_margin: float
    flags: dict
    asserted: bool
    within_tol: bool | None
    tol_gap: float
    mu_max: float
    u_star: np.ndarray = field(repr=False, default=None)
    v_star: np.ndarray = field(repr=False, default=None)

    def to_dict(self):
        return {
            "I_star": self.I_star, "J_star": self.J_star, "gap": self.gap,
            "mu_star": self.mu_star, "slackness": self.slackness,
            "slater_margin": self.slater_margin, "flags": self.flags,
            "asserted": self.asserted, "within_tol": self.within_tol,
            "tol_gap": self.tol_gap, "mu_max": self.mu_max,
            "u_star": np.asarray(self.u_star).tolist(), "v_star": np.asarray(self.v_star).tolist(),
        }


@dataclass
class GapOptions:
    tol_gap: float = 1e-4
    mu_max: float | None = None
    mu_tol: float = 1e-9
    inner: InnerOptions = field(default_factory=InnerOptions)


def multiplier_bound(inst: FiniteInstance, options: InnerOptions | None = None) -> float:
    """Upper bound on any multiplier from the Slater point (the lower corner)."""
    margin = slater_margin(inst)
    if margin <= 0:
        return np.nan
    u0, v0 = inst.lower_corner()
    return max((dual_J(inst, 0.0, options) - objective_value(inst, u0, v0)) / margin, 0.0)


def gap_experiment(inst: FiniteInstance, options: GapOptions | None = None) -> GapReport:
    opts = options or GapOptions()
    flags = inst.flags()
    primal = primal_optimum(inst, opts.inner)
    bound = multiplier_bound(inst, opts.inner)
    mu_max = opts.mu_max if opts.mu_max is not None else (1.5 * bound + 1.0 if np.isfinite(bound) else 10.0)

    J = lambda m: dual_J(inst, m, opts.inner)
    mu, Jmu = golden_section(J, 0.0, mu_max, tol=opts.mu_tol)
    for cand in (0.0, mu_max):
        Jc = J(cand)
        if Jc <= Jmu + 1e-12:
            mu, Jmu = cand, Jc
    slack = mu * psi(inst, primal.u, primal.v) if np.isfinite(primal.value) else np.nan
    asserted = bool(flags["concave"] and flags["convex_in_s"] and flags["slater"])
    gap = Jmu - primal.value
    within = bool(abs(gap) <= opts.tol_gap) if asserted else None
    return GapReport(primal.value, Jmu, gap, mu, slack, flags["slater_margin"], flags,
                     asserted, within, opts.tol_gap, mu_max, primal.u, primal.v)


def random_feasible(inst: FiniteInstance, rng, tries=200):
    """A uniformly drawn feasible pair inside the box (v first, then u below its bound)."""
    I, J = inst.shape
    for _ in range(tries):
        v = rng.uniform(*inst.s_box, J)
        cap = np.min(-inst.phi_matrix(v)[0], axis=1)
        hi = np.minimum(cap, inst.t_box[1])
        if np.all(hi >= inst.t_box[0]):
            return rng.uniform(inst.t_box[0], hi), v
    raise ValueError("no feasible pair found in the box")


def weak_duality_check(inst: FiniteInstance, trials=10, seed=0, tol=1e-8, mu_scale=None,
                       options: InnerOptions | None = None, details=False):
    """``I(u, v) <= J(mu)`` for random feasible pairs and random ``mu >= 0``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    scale = mu_scale if mu_scale is not None else 1.0 + float(np.sum(inst.omega))
    records = []
    for _ in range(trials):
        u, v = random_feasible(inst, rng)
        mu = float(rng.exponential(scale))
        lhs = objective_value(inst, u, v)
        rhs = dual_J(inst, mu, options)
        records.append((mu, lhs, rhs))
    ok = all(l <= r + tol for _, l, r in records)
    return (ok, records) if details else ok


def convexity_probe(inst: FiniteInstance, mus, options: InnerOptions | None = None) -> float:
    """Largest midpoint violation ``J((a + b)/2) - (J(a) + J(b))/2`` over sample pairs."""
    mus = [float(m) for m in mus]
    cache = {}

    def J(m):
        if m not in cache:
            cache[m] = dual_J(inst, m, options)
        return cache[m]

    worst = -np.inf
    for a in range(len(mus)):
        for b in range(a, len(mus)):
            worst = max(worst, J(0.5 * (mus[a] + mus[b])) - 0.5 * (J(mus[a]) + J(mus[b])))
    return float(worst)


@dataclass
class HcProbe:
    margin: float
    midpoint_feasible: bool
    distinct: bool
    strict: bool
    note: str = ""


def hc_uniqueness_probe(inst: FiniteInstance, pairs=None, starts=8, seed=0, tol=1e-12) -> HcProbe:
    """Midpoint of two feasible pairs is feasible and improves the mean objective."""
    if pairs is None:
        rng = np.random.default_rng(seed)
        cands = [np.concatenate(random_feasible(inst, rng)) for _ in range(max(starts, 2))]
        best, pair = -1.0, None
        for a in range(len(cands)):
            for b in range(a + 1, len(cands)):
                d = np.linalg.norm(cands[a] - cands[b])
                if d > best:
                    best, pair = d, (cands[a], cands[b])
        pairs = (inst.split(pair[0]), inst.split(pair[1]))
    (u1, v1), (u2, v2) = [(np.asarray(u, float), np.asarray(v, float)) for u, v in pairs]
    distinct = bool(np.any(u1 != u2) or np.any(v1 != v2))
    um, vm = 0.5 * (u1 + u2), 0.5 * (v1 + v2)
    feas = psi(inst, um, vm) >= -1e-12
    margin = objective_value(inst, um, vm) - 0.5 * (objective_value(inst, u1, v1) + objective_value(inst, u2, v2))
    note = "" if distinct else "only one candidate; no strictness claim"
    return HcProbe(float(margin), bool(feas), distinct, bool(distinct and margin > tol), note)


def random_instance(rng, nx=2, ny=2, objective="linear", cost_range=(1.0, 2.0)) -> FiniteInstance:
    """Table-cost instance with a Slater point at the origin of the box ``[0, 2]^(nx+ny)``."""
    C = rng.uniform(*cost_range, (nx, ny))
    fam = make_family("table", cost=C)
    x = np.arange(nx, dtype=float)[:, None]
    y = np.arange(ny, dtype=float)[:, None]
    omega = product_weights(nx, ny, {"w": rng.uniform(0.5, 1.5, nx), "g": rng.uniform(0.5, 1.5, ny)})
    top = float(cost_range[1])
    if objective == "linear":
        obj = LinearObjective(rng.uniform(0.2, 1.0, nx), rng.uniform(0.2, 1.0, ny))
    elif objective == "separable":
        obj = SeparableObjective(rng.uniform(0.2, 1.0, nx), rng.uniform(0.2, 1.0, ny))
    else:
        obj = QuadraticObjective(rng.uniform(0.5, 1.5, nx), rng.uniform(0.5, 1.5, ny),
                                 c=float(rng.uniform(0.5, 2.0)))
    return FiniteInstance(x, y, omega, obj, fam, (0.0, top), (0.0, top))
