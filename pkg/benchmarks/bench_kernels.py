"""Compare the Cython and pure-Python kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--cells 100] [--atoms 5 10 20] [--repeat 3]

Inputs are the branch values/gradients the solver feeds to the kernels on an
OT instance over the unit square.  Both backends must agree to 1e-12.
"""
import argparse
import time

import numpy as np

from phidual import kernels
from phidual.catalog import make_family
from phidual.measure import SourceChart, build_grid
from phidual.solver import branch_gradients, branch_values


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=100, help="cells per side of the unit square")
    ap.add_argument("--atoms", type=int, nargs="+", default=[5, 10, 20])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    try:
        fast = kernels.get_backend("cython")
    except (ImportError, ValueError) as exc:
        raise SystemExit(f"cython backend unavailable ({exc}); build with pip install -e . --no-build-isolation")
    slow = kernels.get_backend("python")
    rng = np.random.default_rng(args.seed)
    fam = make_family("ot-cost")
    grid = build_grid(SourceChart.box([0, 0], [1, 1]), args.cells)
    hw, mass = grid.half_widths, np.ascontiguousarray(grid.node_mass)

    print(f"grid {args.cells}^2 ({grid.size} nodes), best of {args.repeat}")
    print(f"{'kernel':<16}{'M':>4}{'python [s]':>12}{'cython [s]':>12}{'speedup':>9}{'max diff':>11}")
    for M in args.atoms:
        atoms = rng.uniform(0.05, 0.95, (M, 2))
        s = rng.uniform(-0.02, 0.02, M)
        B = np.ascontiguousarray(branch_values(fam, grid.nodes, atoms, s))
        G = np.ascontiguousarray(branch_gradients(fam, grid.nodes, atoms, s))
        cases = {
            "cell_fractions": lambda k: k.cell_fractions(B, G, hw),
            "atom_mass(all)": lambda k: np.array([k.atom_mass(B, G, hw, mass, j) for j in range(M)]),
            "envelope_argmin": lambda k: np.asarray(k.envelope_argmin(B)[0], float),
        }
        for name, fn in cases.items():
            tp, op = best_of(lambda: fn(slow), args.repeat)
            tc, oc = best_of(lambda: fn(fast), args.repeat)
            diff = float(np.max(np.abs(np.asarray(op) - np.asarray(oc))))
            print(f"{name:<16}{M:>4}{tp:>12.4f}{tc:>12.4f}{tp / tc:>8.1f}x{diff:>11.1e}")
            if diff > 1e-12:
                raise SystemExit(f"backends disagree on {name} (M={M}): {diff:.3e}")


if __name__ == "__main__":
    main()
