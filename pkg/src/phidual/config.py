"""Problem configuration files (JSON) and instance construction."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .catalog import CatalogError, CatalogEntry, make_family
from .measure import CHART_KINDS, AtomicMeasure, SourceChart, balance_check, build_grid, make_density, total_mass

SCHEMA_VERSION = 1
GENERATORS = ("circle", "grid", "random")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def _need(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{where}: missing field {key!r}")
    return d[key]


def _check_keys(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")


SOLVER_DEFAULTS = {"tol_mass": 1e-6, "max_sweeps": 500, "anchor": 0, "newton": False, "init_height": None}
VERIFY_DEFAULTS = {"rays": 1, "tol": 0.01, "gradient": "fd", "agreement": 0.99}
OUTPUT_DEFAULTS = {"cells_csv": False, "hits_csv": False}


@dataclass
class ProblemConfig:
    family: dict
    source: dict
    target: dict
    solver: dict = field(default_factory=lambda: dict(SOLVER_DEFAULTS))
    verify: dict = field(default_factory=lambda: dict(VERIFY_DEFAULTS))
    output: dict = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    # -- (de)serialisation ---------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "ProblemConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        d = copy.deepcopy(raw)
        _check_keys(d, ("schema_version", "seed", "family", "source", "target", "solver", "verify", "output"), "config")
        version = _need(d, "schema_version", "config")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        fam = _need(d, "family", "config")
        _check_keys(fam, ("id", "params"), "family")
        fam = {"id": _need(fam, "id", "family"), "params": dict(fam.get("params", {}))}
        src = _need(d, "source", "config")
        _check_keys(src, ("chart", "resolution", "density"), "source")
        src = {"chart": dict(_need(src, "chart", "source")), "resolution": _need(src, "resolution", "source"),
               "density": src.get("density", {"kind": "uniform"})}
        tgt = dict(_need(d, "target", "config"))
        _check_keys(tgt, ("atoms", "generator", "weights", "normalize"), "target")
        tgt.setdefault("weights", "equal")
        tgt.setdefault("normalize", True)
        if ("atoms" in tgt) == ("generator" in tgt):
            raise ConfigError("target: give exactly one of 'atoms' or 'generator'")
        sections = {}
        for name, defaults in (("solver", SOLVER_DEFAULTS), ("verify", VERIFY_DEFAULTS), ("output", OUTPUT_DEFAULTS)):
            sec = dict(d.get(name, {}))
            _check_keys(sec, defaults, name)
            sections[name] = {**defaults, **sec}
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        cfg = cls(fam, src, tgt, sections["solver"], sections["verify"], sections["output"], seed, version)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy({
            "schema_version": self.schema_version, "seed": self.seed, "family": self.family,
            "source": self.source, "target": self.target, "solver": self.solver,
            "verify": self.verify, "output": self.output,
        })

    @classmethod
    def load(cls, path) -> "ProblemConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(raw)

    def dumps(self) -> str:
        return canonical_json(self.to_dict())

    def instance_hash(self) -> str:
        """sha256 of the sections that define the instance (not verify/output)."""
        part = {k: v for k, v in self.to_dict().items() if k not in ("verify", "output")}
        return hashlib.sha256(canonical_json(part).encode()).hexdigest()

    # -- validation ----------------------------------------------------------------
    def validate(self):
        try:
            make_family(CatalogEntry(self.family["id"], self.family["params"]))
        except CatalogError as exc:
            raise ConfigError(f"family: {exc}") from None
        ch = self.source["chart"]
        if ch.get("kind") not in CHART_KINDS:
            raise ConfigError(f"source.chart: unknown kind {ch.get('kind')!r}; known: {list(CHART_KINDS)}")
        res = self.source["resolution"]
        if not isinstance(res, int) or isinstance(res, bool) or res < 2:
            raise ConfigError("source.resolution must be an integer >= 2")
        try:
            self.chart()
            make_density(self.source["density"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"source: {exc}") from None
        gen = self.target.get("generator")
        if gen is not None:
            if gen.get("kind") not in GENERATORS:
                raise ConfigError(f"target.generator: unknown kind {gen.get('kind')!r}; known: {list(GENERATORS)}")
        w = self.target["weights"]
        if not (w in ("equal", "random") or isinstance(w, list)):
            raise ConfigError("target.weights must be 'equal', 'random' or a list")
        v = self.verify
        if not isinstance(v["rays"], int) or v["rays"] < 1:
            raise ConfigError("verify.rays must be a positive integer")
        if v["gradient"] not in ("closed", "fd"):
            raise ConfigError("verify.gradient must be 'closed' or 'fd'")
        s = self.solver
        if not (isinstance(s["max_sweeps"], int) and s["max_sweeps"] >= 1 and s["tol_mass"] > 0):
            raise ConfigError("solver: need max_sweeps >= 1 and tol_mass > 0")

    # -- construction ----------------------------------------------------------------
    def chart(self) -> SourceChart:
        ch = dict(self.source["chart"])
        kind = ch.pop("kind")
        try:
            if kind == "box":
                return SourceChart.box(ch["lower"], ch["upper"])
            if kind == "disk":
                return SourceChart.disk(ch["center"], ch["radius"])
            return SourceChart.sphere_cap(ch["dimension"], ch["radius"])
        except KeyError as exc:
            raise ConfigError(f"source.chart ({kind}): missing field {exc}") from None

    def build(self, seed=None):
        """Return ``(family, grid, measure)``; raises :class:`ConfigError` on any inconsistency."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        family = make_family(CatalogEntry(self.family["id"], self.family["params"]))
        grid = build_grid(self.chart(), self.source["resolution"], self.source["density"])
        atoms = self._atoms(rng)
        want = family.target_dim(grid.dimension)
        if atoms.shape[1] != want:
            raise ConfigError(f"target atoms must be {want}-dimensional for {family.identifier}")
        w = self.target["weights"]
        if w == "equal":
            w = np.ones(len(atoms))
        elif w == "random":
            w = rng.uniform(0.5, 1.5, len(atoms))
        w = np.asarray(w, float)
        if w.shape != (len(atoms),):
            raise ConfigError("target.weights must have one entry per atom")
        try:
            if self.target["normalize"]:
                w = w * total_mass(grid) / w.sum()
            measure = AtomicMeasure(atoms, w)
        except ValueError as exc:
            raise ConfigError(f"target: {exc}") from None
        ok, deficit = balance_check(grid, measure, 1e-3)
        if not ok:
            raise ConfigError(f"unbalanced instance: source minus target mass = {deficit:.6g}")
        return family, grid, measure

    def _atoms(self, rng):
        if "atoms" in self.target:
            a = np.asarray(self.target["atoms"], float)
            return a[:, None] if a.ndim == 1 else a
        gen = dict(self.target["generator"])
        kind = gen.pop("kind")
        try:
            if kind == "circle":
                return circle_atoms(**gen)
            if kind == "grid":
                return grid_atoms(**gen)
            return random_atoms(rng, **gen)
        except TypeError as exc:
            raise ConfigError(f"target.generator ({kind}): {exc}") from None


def circle_atoms(count, radius, center=(0.0, 0.0), phase=0.0, height=None):
    """``count`` equally spaced points on a circle; ``height`` appends a last coordinate."""
    ang = phase + 2 * np.pi * np.arange(count) / count
    c = np.asarray(center, float)
    pts = c + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if height is not None:
        pts = np.concatenate([pts, np.full((count, 1), float(height))], axis=1)
    return pts


def grid_atoms(count, lower, upper, height=None):
    """Tensor grid with ``count`` points per axis spanning ``[lower, upper]``."""
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    axes = [np.linspace(lower[k], upper[k], count) for k in range(len(lower))]
    pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    if height is not None:
        pts = np.concatenate([pts, np.full((len(pts), 1), float(height))], axis=1)
    return pts


def random_atoms(rng, count, lower, upper, height=None):
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    pts = rng.uniform(lower, upper, (count, len(lower)))
    if height is not None:
        pts = np.concatenate([pts, np.full((count, 1), float(height))], axis=1)
    return pts


def _clean(obj):
    """Convert numpy scalars/arrays so that ``json`` can serialise them."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def canonical_json(obj) -> str:
    """Deterministic JSON text (sorted keys, shortest float repr)."""
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"
