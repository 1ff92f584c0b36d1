import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phidual.catalog import make_family
from phidual.measure import AtomicMeasure, SourceChart, build_grid, total_mass
from phidual.solver import (SolveOptions, cell_mass_curve, discrete_oracle_ot, hungarian,
                            solve_discrete_ot, solve_semidiscrete, working_range)
from phidual.transforms import DualPotential, decompose
from instances import uniform_measure
from oracles import brute_force_min_assignment, scipy_assignment

OT = make_family("ot-cost")
PR = make_family("reflector-nf-parallel")
BOX = SourceChart.box([0, 0], [1, 1])
DISK = SourceChart.disk([0, 0], 1.0)


def test_single_atom_is_immediate():
    grid = build_grid(BOX, 20)
    pot, rep = solve_semidiscrete(OT, grid, uniform_measure(grid, [[0.3, 0.3]]))
    assert rep.converged and rep.sweeps == 0 and rep.max_residual <= 1e-14


def test_ot_two_symmetric_atoms():
    grid = build_grid(BOX, 40)
    m = uniform_measure(grid, [[0.25, 0.5], [0.75, 0.5]])
    pot, rep = solve_semidiscrete(OT, grid, m, SolveOptions(tol_mass=1e-10))
    assert rep.converged and abs(pot.s[0] - pot.s[1]) <= 1e-8


def test_ot_unequal_weights_closed_form_split():
    # two atoms on a horizontal line: the Laguerre boundary is a vertical line x1 = c
    grid = build_grid(BOX, 50)
    m = uniform_measure(grid, [[0.25, 0.5], [0.75, 0.5]], [0.3, 0.7])
    pot, rep = solve_semidiscrete(OT, grid, m, SolveOptions(tol_mass=1e-10))
    # the branches c(x, y_j) - s_j agree on the boundary line x1 = 0.3
    c = 0.3
    d = 0.5 * ((c - 0.25) ** 2 - (c - 0.75) ** 2)
    assert (pot.s[0] - pot.s[1]) == pytest.approx(d, abs=1e-8)


def test_parallel_reflector_five_atoms():
    grid = build_grid(DISK, 40)
    ang = 0.3 + 2 * np.pi * np.arange(5) / 5
    atoms = 0.5 * np.c_[np.cos(ang), np.sin(ang)]
    m = uniform_measure(grid, atoms, [1, 2, 1.5, 1, 2.5])
    pot, rep = solve_semidiscrete(PR, grid, m, SolveOptions(init_height=1.0))
    assert rep.converged and rep.max_residual <= 1e-6
    cells = decompose(PR, grid, pot)
    assert np.allclose(cells.masses, m.weights * rep.target_scale, atol=1e-6 * total_mass(grid))


def test_history_nonincreasing():
    grid = build_grid(DISK, 40)
    rng = np.random.default_rng(2)
    m = uniform_measure(grid, rng.uniform(-0.6, 0.6, (6, 2)), rng.uniform(0.5, 1.5, 6))
    _, rep = solve_semidiscrete(PR, grid, m, SolveOptions(init_height=1.0, tol_mass=1e-9))
    h = np.array(rep.history)
    assert rep.converged and len(h) >= 2
    assert np.all(np.diff(h) <= 1e-12 * total_mass(grid))


def test_nonconvergence_reported():
    grid = build_grid(DISK, 30)
    rng = np.random.default_rng(3)
    m = uniform_measure(grid, rng.uniform(-0.6, 0.6, (6, 2)))
    _, rep = solve_semidiscrete(PR, grid, m, SolveOptions(init_height=1.0, max_sweeps=1, tol_mass=1e-14))
    assert not rep.converged and "no convergence" in rep.message


def test_unbalanced_rejected():
    grid = build_grid(BOX, 10)
    with pytest.raises(ValueError):
        solve_semidiscrete(OT, grid, AtomicMeasure([[0.5, 0.5]], [2.0]))


def test_cell_mass_curve():
    grid = build_grid(BOX, 30)
    atoms = np.array([[0.25, 0.5], [0.75, 0.5], [0.5, 0.9]])
    pot = DualPotential(OT, atoms, [0.0, 0.0, 0.0])
    ss = np.linspace(-1.0, 1.0, 41)
    curve = cell_mass_curve(OT, grid, pot, 0, ss)
    assert np.all(np.diff(curve) >= -1e-15)
    assert curve[0] == 0.0 and curve[-1] == pytest.approx(1.0)
    single = cell_mass_curve(OT, grid, DualPotential(OT, atoms[:1], [0.0]), 0, ss)
    assert np.allclose(single, total_mass(grid))


def test_gauge_shift_leaves_cells_unchanged():
    grid = build_grid(BOX, 30)
    rng = np.random.default_rng(4)
    atoms, s = rng.uniform(0, 1, (5, 2)), rng.normal(0, 0.05, 5)
    a = decompose(OT, grid, DualPotential(OT, atoms, s))
    b = decompose(OT, grid, DualPotential(OT, atoms, s + 0.375))  # exact binary shift
    assert np.array_equal(a.active, b.active)
    assert np.allclose(a.masses, b.masses, atol=1e-12)


def test_working_range_parallel_refractor():
    fam = make_family("refractor-nf-parallel")
    lo, hi = working_range(fam, np.zeros((1, 2)), np.zeros(2))
    assert fam.s_lo < lo < hi < fam.s_hi


def test_discrete_oracle_small_cases():
    r = discrete_oracle_ot([[3.0]])
    assert r["primal"] == 3.0 and r["relative_gap"] <= 1e-12
    r = discrete_oracle_ot([[0.0, 1.0], [1.0, 0.0]])
    assert r["primal"] == 0.0 and abs(r["dual"]) <= 1e-12 and r["feasible"]
    with pytest.raises(ValueError):
        discrete_oracle_ot(np.zeros((9, 9)))
    with pytest.raises(ValueError):
        discrete_oracle_ot(np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 7))
def test_hungarian_against_oracles(seed, n):
    C = np.random.default_rng(seed).uniform(0, 10, (n, n))
    assign, value, u, v = hungarian(C)
    assert value == pytest.approx(scipy_assignment(C), abs=1e-10)
    assert value == pytest.approx(brute_force_min_assignment(C), abs=1e-10)
    assert np.all(u[:, None] + v[None, :] <= C + 1e-10)
    d = solve_discrete_ot(C)
    assert d["feasible"] and d["dual"] == pytest.approx(value, rel=1e-10)
