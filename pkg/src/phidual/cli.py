"""Command line front end: ``phidual {solve,verify,duality,check}``.

Exit codes: 0 success, 2 configuration / validation / hash error,
3 non-convergence or a tolerance exceeded.  Reports are canonical JSON
(identical bytes for identical inputs); wall-clock times go to a separate
``timing.json``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .catalog import CatalogError, make_family
from .config import SCHEMA_VERSION, ConfigError, ProblemConfig, canonical_json
from .constraint import InvalidPoint, OutsideDualDomain, check_derivatives, check_H2, check_monotonicity
from .duality import FiniteInstance, GapOptions, InnerOptions, gap_experiment
from .optics import TraceError, map_agreement, trace
from .solver import SolveOptions, solve_semidiscrete
from .transforms import DualPotential, decompose, generalized_residual

EXIT_OK, EXIT_CONFIG, EXIT_TOL = 0, 2, 3


class _Fail(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _write(out: Path, name: str, payload):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(canonical_json(payload))


def _timing(out: Path, command: str, seconds: float):
    _write(out, "timing.json", {"command": command, "wall_clock_seconds": seconds})


def _header(command, cfg_hash=None, seed=None):
    return {"schema_version": SCHEMA_VERSION, "command": command, "version": __version__,
            "instance_hash": cfg_hash, "seed": seed}


def _load_problem(args):
    if not args.config:
        raise _Fail(EXIT_CONFIG, "--config is required")
    try:
        return ProblemConfig.load(args.config)
    except ConfigError as exc:
        raise _Fail(EXIT_CONFIG, str(exc))


def _build(cfg, seed):
    try:
        return cfg.build(seed)
    except (ConfigError, CatalogError, InvalidPoint, OutsideDualDomain, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"{type(exc).__name__}: {exc}")


# -- solve ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg = _load_problem(args)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    t0 = time.perf_counter()
    family, grid, measure = _build(cfg, seed)
    sv = dict(cfg.solver)
    if args.tol is not None:
        sv["tol_mass"] = args.tol
    try:
        opts = SolveOptions(tol_mass=sv["tol_mass"], max_sweeps=sv["max_sweeps"], anchor=sv["anchor"],
                            newton=sv["newton"], init_height=sv["init_height"])
        pot, rep = solve_semidiscrete(family, grid, measure, opts)
    except (InvalidPoint, OutsideDualDomain, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"{type(exc).__name__}: {exc}")
    report = {**_header("solve", cfg.instance_hash(), seed), **rep.to_dict(timing=False),
              "family": family.identifier, "atoms": measure.atoms, "target": measure.weights,
              "nodes": grid.size}
    _write(out, "solve_report.json", report)
    if cfg.output["cells_csv"]:
        cells = decompose(family, grid, pot)
        u = pot.branches(grid.nodes).min(axis=1)
        with open(out / "cells.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(grid.dimension)] + ["atom", "u", "boundary"])
            for i in range(grid.size):
                w.writerow([repr(float(c)) for c in grid.nodes[i]]
                           + [int(cells.active[i]), repr(float(u[i])), int(cells.boundary[i])])
    _timing(out, "solve", time.perf_counter() - t0)
    print(f"solve: {rep.message}; max residual {rep.max_residual:.3e} after {rep.sweeps} sweeps")
    return EXIT_OK if rep.converged else EXIT_TOL


# -- verify --------------------------------------------------------------------------

def cmd_verify(args) -> int:
    cfg = _load_problem(args)
    out = Path(args.out)
    rpath = Path(args.report) if args.report else out / "solve_report.json"
    try:
        report = json.loads(rpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _Fail(EXIT_CONFIG, f"cannot read solve report {rpath}: {exc}")
    if report.get("instance_hash") != cfg.instance_hash():
        raise _Fail(EXIT_CONFIG, "instance hash of the solve report does not match the config")
    seed = report.get("seed", cfg.seed)
    t0 = time.perf_counter()
    family, grid, measure = _build(cfg, seed)
    s = np.asarray(report.get("s", []), float)
    if s.shape != (measure.size,):
        raise _Fail(EXIT_CONFIG, "solve report has the wrong number of weights")
    vf = dict(cfg.verify)
    rays = args.rays if args.rays is not None else vf["rays"]
    tol = args.tol if args.tol is not None else vf["tol"]
    if rays < 1:
        raise _Fail(EXIT_CONFIG, "--rays must be >= 1")
    pot = DualPotential(family, measure.atoms, s)
    try:
        cells = decompose(family, grid, pot)
        tr = trace(grid, pot, measure, rays=rays, gradient=vf["gradient"])
    except InvalidPoint as exc:
        raise _Fail(EXIT_CONFIG, f"InvalidPoint: {exc}")
    except TraceError as exc:
        # an untraceable surface is a verification failure, not a config error,
        # unless the family has no optical model at all
        if family.optics is None:
            raise _Fail(EXIT_CONFIG, str(exc))
        payload = {**_header("verify", cfg.instance_hash(), seed), "error": str(exc), "passed": False}
        _write(out, "trace_report.json", payload)
        _timing(out, "verify", time.perf_counter() - t0)
        print(f"verify: {exc}")
        return EXIT_TOL
    agree = map_agreement(grid, pot, tr, cells)
    _, rel = generalized_residual(grid, measure.scaled(grid.node_mass.sum() / measure.weights.sum()), cells)
    passed = tr.histogram_l1 <= tol
    payload = {**_header("verify", cfg.instance_hash(), seed), **tr.to_dict(), **agree,
               "tol": tol, "rays_per_axis": rays, "cell_residual": rel, "passed": bool(passed)}
    _write(out, "trace_report.json", payload)
    tr.write_csv(out / "hits.csv")
    with open(out / "residuals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["atom", "target", "hit_mass", "cell_mass"])
        for j in range(measure.size):
            w.writerow([j, repr(float(tr.target[j])), repr(float(tr.hit_mass[j])), repr(float(cells.masses[j]))])
    _timing(out, "verify", time.perf_counter() - t0)
    print(f"verify: histogram L1 {tr.histogram_l1:.3e} (tol {tol:g}); agreement {agree['agreement']:.4f}")
    return EXIT_OK if passed else EXIT_TOL


# -- duality ---------------------------------------------------------------------------

DUALITY_KEYS = ("schema_version", "x", "y", "omega", "objective", "family", "box", "flags", "tol_gap", "inner", "mu_max")


def cmd_duality(args) -> int:
    if not args.config:
        raise _Fail(EXIT_CONFIG, "--config is required")
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _Fail(EXIT_CONFIG, f"cannot read config: {exc}")
    if not isinstance(raw, dict) or raw.get("schema_version") != SCHEMA_VERSION:
        raise _Fail(EXIT_CONFIG, f"duality config needs schema_version {SCHEMA_VERSION}")
    extra = set(raw) - set(DUALITY_KEYS)
    if extra:
        raise _Fail(EXIT_CONFIG, f"duality config: unknown field(s) {sorted(extra)}")
    try:
        inst = FiniteInstance.from_dict(raw)
        inner = InnerOptions(**raw.get("inner", {}))
        if args.seed is not None:
            inner.seed = args.seed
        tol = args.tol if args.tol is not None else float(raw.get("tol_gap", 1e-4))
        opts = GapOptions(tol_gap=tol, mu_max=raw.get("mu_max"), inner=inner)
    except (ValueError, TypeError, CatalogError) as exc:
        raise _Fail(EXIT_CONFIG, f"{type(exc).__name__}: {exc}")
    out = Path(args.out)
    t0 = time.perf_counter()
    rep = gap_experiment(inst, opts)
    digest = hashlib.sha256(canonical_json(raw).encode()).hexdigest()
    _write(out, "gap_report.json", {**_header("duality", digest, inner.seed), **rep.to_dict()})
    _timing(out, "duality", time.perf_counter() - t0)
    state = "asserted" if rep.asserted else "not asserted (flags or Slater condition missing)"
    print(f"duality: I*={rep.I_star:.9g} J*={rep.J_star:.9g} gap={rep.gap:.3e} [{state}]")
    return EXIT_TOL if rep.asserted and not rep.within_tol else EXIT_OK


# -- check -------------------------------------------------------------------------------

def cmd_check(args) -> int:
    fam_id, params, samples = args.family, {}, args.samples
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise _Fail(EXIT_CONFIG, f"cannot read config: {exc}")
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise _Fail(EXIT_CONFIG, f"check config needs schema_version {SCHEMA_VERSION}")
        fam = raw.get("family", {})
        fam_id = fam_id or fam.get("id")
        params = dict(fam.get("params", {}))
        samples = samples if samples is not None else raw.get("samples")
    if args.params:
        try:
            params.update(json.loads(args.params))
        except json.JSONDecodeError as exc:
            raise _Fail(EXIT_CONFIG, f"--params is not JSON: {exc}")
    if not fam_id:
        raise _Fail(EXIT_CONFIG, "no family given (--family or --config)")
    samples = 200 if samples is None else samples
    if not isinstance(samples, int) or samples < 1:
        raise _Fail(EXIT_CONFIG, "samples must be a positive integer")
    try:
        family = make_family(fam_id, **params)
    except CatalogError as exc:
        raise _Fail(EXIT_CONFIG, str(exc))
    seed = 0 if args.seed is None else args.seed
    tol = 1e-6 if args.tol is None else args.tol
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        rep = check_derivatives(family, samples, seed)
        det, det_at = check_H2(family, samples, seed)
        mono, mono_ok, mono_at = check_monotonicity(family, samples, seed)
    except (RuntimeError, ValueError) as exc:
        raise _Fail(EXIT_CONFIG, f"sampling failed: {exc}")
    passed = rep.passed(tol) and det > 0 and mono_ok
    payload = {**_header("check", None, seed), "derivatives": rep.to_dict(), "tol": tol,
               "h2_min_abs_det": det, "h2_location": det_at,
               "min_phi_s": mono, "theta0": family.theta0(), "monotone": mono_ok, "monotone_location": mono_at,
               "passed": bool(passed)}
    _write(out, "check_report.json", payload)
    _timing(out, "check", time.perf_counter() - t0)
    print(f"check {family.identifier}: worst derivative error {rep.worst_error:.2e}, "
          f"min |det H2| {det:.3e}, min phi_s {mono:.3e} -> {'ok' if passed else 'FAILED'}")
    return EXIT_OK if passed else EXIT_TOL


# -- entry point ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="phidual", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, rays=False):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--tol", type=float, default=None, help="override the command's tolerance")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        if rays:
            sp.add_argument("--rays", type=int, default=None, help="rays per node and axis")

    common(sub.add_parser("solve", help="solve the semi-discrete dual problem"))
    v = sub.add_parser("verify", help="raytrace a solved instance")
    common(v, seed=False, rays=True)
    v.add_argument("--report", help="solve report (default: OUT/solve_report.json)")
    common(sub.add_parser("duality", help="finite-instance duality gap experiment"))
    c = sub.add_parser("check", help="derivative, (H2) and monotonicity checks for a family")
    common(c)
    c.add_argument("--family", help="family identifier")
    c.add_argument("--params", help="family parameters as a JSON object")
    c.add_argument("--samples", type=int, default=None)
    return p


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "duality": cmd_duality, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _Fail as exc:
        print(f"phidual {args.command}: error: {exc}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out and exc.code == EXIT_CONFIG:
            try:
                _write(Path(out), f"{args.command}_error.json",
                       {**_header(args.command), "error": str(exc), "exit_code": exc.code})
            except OSError:
                pass
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
