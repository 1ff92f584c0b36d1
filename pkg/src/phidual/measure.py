"""Source charts, quadrature grids and atomic target measures."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

CHART_KINDS = ("box", "disk", "sphere-cap")


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SourceChart:
    """Coordinate chart for the source domain.

    ``box`` uses ``lower``/``upper``; ``disk`` uses ``center``/``radius``;
    ``sphere-cap`` is the graph chart of the upper unit sphere restricted to
    ``|x| <= radius`` (``radius < 1``), lifted by ``X = (x, sqrt(1 - |x|^2))``.
    """

    kind: str
    dimension: int
    lower: tuple = ()
    upper: tuple = ()
    center: tuple = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in CHART_KINDS:
            raise ValueError(f"unknown chart kind {self.kind!r}")
        if self.dimension not in (1, 2):
            raise ValueError("chart dimension must be 1 or 2")
        n = self.dimension
        if self.kind == "box":
            lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
            if lo.shape != (n,) or hi.shape != (n,) or np.any(hi <= lo):
                raise ValueError("box chart needs lower < upper in every coordinate")
        elif self.kind == "disk":
            if len(self.center) != n or not self.radius > 0:
                raise ValueError("disk chart needs a center and a positive radius")
        else:
            if not 0 < self.radius < 1:
                raise ValueError("sphere-cap chart radius must lie in (0, 1)")
            if not self.center:
                object.__setattr__(self, "center", (0.0,) * n)
            if any(c != 0 for c in self.center):
                raise ValueError("sphere-cap chart is centred at the pole")

    @classmethod
    def box(cls, lower, upper):
        lower, upper = tuple(map(float, np.atleast_1d(lower))), tuple(map(float, np.atleast_1d(upper)))
        return cls("box", len(lower), lower=lower, upper=upper)

    @classmethod
    def disk(cls, center, radius):
        center = tuple(map(float, np.atleast_1d(center)))
        return cls("disk", len(center), center=center, radius=float(radius))

    @classmethod
    def sphere_cap(cls, dimension, radius):
        return cls("sphere-cap", int(dimension), center=(0.0,) * int(dimension), radius=float(radius))

    @property
    def lifted(self) -> bool:
        return self.kind == "sphere-cap"

    def bounding_box(self):
        if self.kind == "box":
            return np.asarray(self.lower, float), np.asarray(self.upper, float)
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.kind == "box":
            return np.all((x >= self.lower) & (x <= self.upper), axis=-1)
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) <= self.radius

    def analytic_measure(self) -> float:
        """Lebesgue measure of the chart (surface measure for sphere caps)."""
        n, r = self.dimension, self.radius
        if self.kind == "box":
            return float(np.prod(np.subtract(self.upper, self.lower)))
        if self.kind == "disk":
            return 2 * r if n == 1 else np.pi * r**2
        # dS = dx / omega(x)
        return 2 * np.arcsin(r) if n == 1 else 2 * np.pi * (1 - np.sqrt(1 - r**2))


def lift(x) -> np.ndarray:
    """Lift chart coordinates onto the upper unit sphere."""
    x = np.asarray(x, float)
    w = np.sqrt(np.clip(1.0 - np.sum(x * x, axis=-1), 0.0, None))
    return np.concatenate([x, w[..., None]], axis=-1)


def omega(x) -> np.ndarray:
    x = np.asarray(x, float)
    return np.sqrt(1.0 - np.sum(x * x, axis=-1))


# -- densities ---------------------------------------------------------------

def _linear(x, c0=0.0, coef=(1.0,)):
    coef = np.zeros(x.shape[-1]) + np.pad(np.asarray(coef, float), (0, max(0, x.shape[-1] - len(coef))))[: x.shape[-1]]
    return c0 + x @ coef


def _gaussian(x, center=None, sigma=1.0, amplitude=1.0, floor=0.0):
    c = np.zeros(x.shape[-1]) if center is None else np.asarray(center, float)
    return floor + amplitude * np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * sigma**2))


def _quadratic(x, center=None, a=1.0, b=1.0):
    c = np.zeros(x.shape[-1]) if center is None else np.asarray(center, float)
    return a + b * np.sum((x - c) ** 2, axis=-1)


#: Named closed-form densities usable from config files via
#: ``{"kind": "expr", "name": ..., "params": {...}}``.
DENSITY_CATALOG: dict[str, Callable] = {
    "linear": _linear,  # c0 + coef . x
    "gaussian": _gaussian,  # floor + amplitude * exp(-|x - center|^2 / (2 sigma^2))
    "quadratic": _quadratic,  # a + b |x - center|^2
}


def make_density(spec) -> Callable[[np.ndarray], np.ndarray]:
    """Turn a density spec (dict, ``"uniform"`` or callable) into an evaluator."""
    if callable(spec):
        return spec
    if spec is None or spec == "uniform":
        spec = {"kind": "uniform"}
    if not isinstance(spec, Mapping):
        raise ValueError(f"bad density spec {spec!r}")
    kind = spec.get("kind")
    if kind == "uniform":
        value = float(spec.get("value", 1.0))
        return lambda x: np.full(np.shape(x)[:-1], value)
    if kind == "expr":
        name = spec.get("name")
        if name not in DENSITY_CATALOG:
            raise ValueError(f"unknown density {name!r}; known: {sorted(DENSITY_CATALOG)}")
        fn, params = DENSITY_CATALOG[name], dict(spec.get("params", {}))
        return lambda x: fn(np.asarray(x, float), **params)
    raise ValueError(f"unknown density kind {kind!r}")


# -- grids -------------------------------------------------------------------

@dataclass(frozen=True)
class SourceGrid:
    """Midpoint-rule discretisation of a chart.

    ``index`` holds the integer lattice position of every node and ``lookup``
    maps lattice positions back to node numbers (``-1`` for excluded cells).
    """

    chart: SourceChart
    nodes: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    spacing: np.ndarray
    index: np.ndarray
    lookup: np.ndarray = field(repr=False)

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if np.any(self.density < 0) or not np.any(self.density > 0):
            raise ValueError("density must be nonnegative and not identically zero")

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def dimension(self) -> int:
        return self.chart.dimension

    @property
    def node_mass(self) -> np.ndarray:
        return self.weights * self.density

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * self.spacing

    def lifted_nodes(self) -> np.ndarray:
        return lift(self.nodes) if self.chart.lifted else self.nodes

    def centroid(self) -> np.ndarray:
        return np.average(self.nodes, axis=0, weights=self.weights)

    def neighbor(self, axis: int, step: int) -> np.ndarray:
        """Node numbers of the lattice neighbours, ``-1`` where absent."""
        delta = np.zeros(self.dimension, int)
        delta[axis] = step
        return self.offset(delta)

    def offset(self, delta) -> np.ndarray:
        """Node numbers at lattice offset ``delta`` from every node (``-1`` if absent)."""
        pos = self.index + np.asarray(delta, int)
        shape = np.array(self.lookup.shape)
        ok = np.all((pos >= 0) & (pos < shape), axis=1)
        out = np.full(self.size, -1)
        out[ok] = self.lookup[tuple(pos[ok].T)]
        return out

    def with_density(self, density) -> "SourceGrid":
        f = make_density(density)(self.nodes) if not isinstance(density, np.ndarray) else density
        return SourceGrid(self.chart, self.nodes, self.weights, _frozen(f), self.spacing, self.index, self.lookup)


def build_grid(chart: SourceChart, resolution: int, density="uniform") -> SourceGrid:
    """Uniform midpoint lattice with ``resolution`` cells per unit chart length.

    Each axis of the chart's bounding box gets ``ceil(width * resolution)``
    equal cells.  Disk and cap charts keep the lattice cells whose centre
    lies inside the chart, each with the full cell measure (no partial-cell
    clipping).
    """
    if int(resolution) != resolution or resolution < 2:
        raise ValueError("resolution must be an integer >= 2")
    resolution = int(resolution)
    f = make_density(density)
    lo, hi = chart.bounding_box()
    n = chart.dimension
    counts = np.maximum(np.ceil((hi - lo) * resolution - 1e-9).astype(int), 1)
    h = (hi - lo) / counts
    axes = [lo[k] + (np.arange(counts[k]) + 0.5) * h[k] for k in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    idx = np.stack([m.ravel() for m in np.meshgrid(*[np.arange(c) for c in counts], indexing="ij")], axis=-1)
    keep = chart.contains(pts) if chart.kind != "box" else np.ones(len(pts), bool)
    pts, idx = pts[keep], idx[keep]
    if len(pts) == 0:
        raise ValueError("resolution too coarse: no lattice cell centre inside the chart")
    w = np.full(len(pts), np.prod(h))
    if chart.lifted:
        w = w / omega(pts)
    lookup = np.full(tuple(counts), -1)
    lookup[tuple(idx.T)] = np.arange(len(pts))
    dens = np.asarray(f(pts), float)
    if dens.shape != (len(pts),):
        raise ValueError("density evaluator returned the wrong shape")
    lookup.setflags(write=False)
    return SourceGrid(chart, _frozen(pts), _frozen(w), _frozen(dens), _frozen(h), _frozen(idx, int), lookup)


@dataclass(frozen=True)
class AtomicMeasure:
    """Target measure ``sum_j g_j delta_{y_j}``."""

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        w = np.array(self.weights, float).ravel()
        if atoms.ndim != 2 or len(atoms) != len(w) or len(w) == 0:
            raise ValueError("atoms must be (M, m) with one weight per atom")
        if np.any(w <= 0):
            raise ValueError("atom weights must be positive")
        if len(w) > 1:
            d = np.linalg.norm(atoms[:, None] - atoms[None], axis=-1)
            d[np.diag_indices(len(w))] = np.inf
            if d.min() == 0:
                raise ValueError("atoms must be pairwise distinct")
        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def size(self) -> int:
        return len(self.weights)

    def scaled(self, factor: float) -> "AtomicMeasure":
        return AtomicMeasure(self.atoms, self.weights * factor)


def total_mass(obj) -> float:
    """``sum w_i f_i`` for a grid, ``sum g_j`` for an atomic measure."""
    if isinstance(obj, SourceGrid):
        return float(np.sum(obj.weights * obj.density))
    if isinstance(obj, AtomicMeasure):
        return float(np.sum(obj.weights))
    raise TypeError(f"no mass for {type(obj).__name__}")


def balance_check(grid: SourceGrid, measure: AtomicMeasure, tol: float):
    """Return ``(balanced, deficit)`` with ``deficit = mass(f) - mass(g)``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    mf = total_mass(grid)
    if mf <= 0:
        raise ValueError("source mass is zero")
    deficit = mf - total_mass(measure)
    return bool(abs(deficit) <= tol * mf), deficit
