import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phidual.catalog import make_family
from phidual.constraint import (InvalidPoint, OutsideDualDomain, check_derivatives, check_H2,
                                check_monotonicity, evaluate, h2_matrix, solve_s)
from instances import FAMILIES, SETUPS
from oracles import bisect_root

PR = make_family("reflector-nf-parallel")
OT = make_family("ot-cost")


def _fam(fid):
    return make_family(fid, **SETUPS[fid][0])


def test_parallel_reflector_values():
    b = evaluate(PR, [0.6, 0.0], [0.0, 0.0], 1.0)
    assert b.phi == pytest.approx(-0.32, abs=1e-15)
    assert b.phi_s == pytest.approx(0.68, abs=1e-15)
    b = evaluate(PR, [0.3, 0.2], [0.3, 0.2], 1.0)
    assert np.allclose(b.phi_x, 0) and b.phi_s == pytest.approx(0.5)


def test_ot_on_diagonal():
    assert OT.phi([0.3, 0.7], [0.3, 0.7], 1.25) == 1.25


def test_evaluate_rejects_invalid():
    with pytest.raises(InvalidPoint):
        evaluate(PR, [0.0, 0.0], [0.0, 0.0], -1.0)


def test_solve_closed_forms():
    x, y = np.array([0.1, 0.4]), np.array([0.7, 0.2])
    c = 0.5 * np.sum((x - y) ** 2)
    assert solve_s(OT, x, y, 0.3) == pytest.approx(c - 0.3, abs=1e-15)
    assert solve_s(PR, [0.2, 0.2], [0.2, 0.2], 0.5) == pytest.approx(1.0, abs=1e-14)


def test_point_reflector_round_trip():
    fam = make_family("reflector-nf-point")
    x, y, s = fam.sample(np.random.default_rng(3), 1000)
    back = solve_s(fam, x, y, -fam.phi(x, y, s))
    assert np.max(np.abs(back - s)) <= 1e-12


@pytest.mark.parametrize("fid", FAMILIES)
def test_round_trip_all_families(fid):
    fam = _fam(fid)
    x, y, s = fam.sample(np.random.default_rng(11), 300)
    back = solve_s(fam, x, y, -fam.phi(x, y, s))
    assert np.max(np.abs(back - s) / (1 + np.abs(s))) <= 1e-10


@pytest.mark.parametrize("fid", ["reflector-nf-point", "refractor-nf-point", "refractor-nf-parallel"])
def test_solve_matches_plain_bisection(fid):
    fam = _fam(fid)
    x, y, s = fam.sample(np.random.default_rng(5), 20)
    lo, hi = fam.s_bounds(x, y)
    for k in range(20):
        t = -fam.phi(x[k], y[k], s[k])
        a = lo[k] + 1e-12 if np.isfinite(lo[k]) else s[k] - 20
        b = hi[k] - 1e-12 if np.isfinite(hi[k]) else s[k] + 20
        ref = bisect_root(lambda z: t + fam.phi(x[k], y[k], z), a, b)
        assert abs(solve_s(fam, x[k], y[k], t) - ref) <= 1e-9 * (1 + abs(ref))


def test_solve_outside_domain():
    # at x = y the parallel-reflector phi stays below -1/(2 s_max) on the s-range
    with pytest.raises(OutsideDualDomain):
        solve_s(PR, [0.0, 0.0], [0.0, 0.0], -10.0)
    assert np.isinf(solve_s(PR, [0.0, 0.0], [0.0, 0.0], -10.0, beyond="inf"))
    assert solve_s(PR, [0.0, 0.0], [0.0, 0.0], 10.0) == pytest.approx(0.05, abs=1e-15)


@pytest.mark.parametrize("fid", ["ot-cost", "reflector-nf-parallel", "reflector-nf-point", "refractor-nf-parallel"])
def test_conjugate_t_derivative(fid):
    fam = _fam(fid)
    x, y, s = fam.sample(np.random.default_rng(8), 50)
    t = -fam.phi(x, y, s)
    h = 1e-6
    d = (solve_s(fam, x, y, t + h) - solve_s(fam, x, y, t - h)) / (2 * h)
    assert np.max(np.abs(d + 1 / fam.phi_s(x, y, s)) * np.abs(fam.phi_s(x, y, s))) <= 1e-6


def test_check_derivatives_errors_and_ot():
    with pytest.raises(ValueError):
        check_derivatives(OT, 0)
    assert check_derivatives(OT, 200).worst_error <= 1e-8


@pytest.mark.parametrize("fid", FAMILIES)
def test_check_derivatives_all(fid):
    rep = check_derivatives(_fam(fid), 200, seed=1)
    assert rep.passed(1e-6), rep.max_error


def test_h2_and_monotonicity_ot():
    det, _ = check_H2(OT, 100)
    assert det == pytest.approx(1.0, abs=1e-8)
    m, ok, _ = check_monotonicity(OT, 100)
    assert m == 1.0 and ok


def test_h2_and_monotonicity_parallel_reflector():
    det, _ = check_H2(PR, 500, s_range=(0.5, 2.0), max_dist=0.9)
    assert det > 0
    m, ok, _ = check_monotonicity(PR, 500, s_range=(0.5, 2.0))
    assert m >= 0.125 and ok


def test_h2_matrix_matches_fd():
    fam = _fam("reflector-nf-parallel")
    x, y, s = np.array([0.2, -0.1]), np.array([0.5, 0.3]), 1.3
    # d/dy of phi_x along the level set phi = const: phi_xy - phi_xs phi_y / phi_s
    H = h2_matrix(fam, x, y, s)
    t = fam.phi(x, y, s)
    h = 1e-5
    cols = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        sp = solve_s(fam, x, y + e, -t)
        sm = solve_s(fam, x, y - e, -t)
        cols.append((fam.phi_x(x, y + e, sp) - fam.phi_x(x, y - e, sm)) / (2 * h))
    assert np.allclose(H, np.stack(cols, axis=-1), atol=1e-7)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.3, 3.5), st.floats(0.01, 1.0))
def test_phi_increasing_in_s(x1, x2, s, ds):
    x, y = np.array([x1, x2]), np.array([0.1, -0.2])
    assert PR.phi(x, y, s + ds) > PR.phi(x, y, s)
