import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from phidual.measure import (AtomicMeasure, SourceChart, balance_check, build_grid, lift,
                             make_density, total_mass)
from oracles import cap_area


def test_box_grid_counts_and_weights():
    g = build_grid(SourceChart.box([0, 0], [1, 1]), 10)
    assert g.size == 100
    assert abs(g.weights.sum() - 1.0) <= 1e-12


def test_disk_area():
    g = build_grid(SourceChart.disk([0, 0], 1.0), 50)
    assert abs(g.weights.sum() - np.pi) <= 1e-2


def test_resolution_is_cells_per_unit_length():
    g = build_grid(SourceChart.disk([0, 0], 0.5), 40)
    assert g.lookup.shape == (40, 40)
    g = build_grid(SourceChart.box([0, 0], [2, 1]), 10)
    assert g.lookup.shape == (20, 10) and np.allclose(g.spacing, 0.1)


def test_cap_area_matches_surface_integral():
    g = build_grid(SourceChart.sphere_cap(2, 0.5), 40)
    ref = cap_area(0.5)
    assert abs(g.weights.sum() - ref) / ref <= 1e-2
    assert abs(SourceChart.sphere_cap(2, 0.5).analytic_measure() - ref) < 1e-14


def test_cap_area_1d():
    g = build_grid(SourceChart.sphere_cap(1, 0.6), 400)
    assert abs(g.weights.sum() - 2 * np.arcsin(0.6)) < 1e-3


def test_lift_is_unit():
    g = build_grid(SourceChart.sphere_cap(2, 0.9), 60)
    X = g.lifted_nodes()
    assert np.max(np.abs(np.linalg.norm(X, axis=1) - 1)) <= 1e-14


@given(st.lists(st.floats(-0.7, 0.7), min_size=2, max_size=2))
def test_lift_unit_property(x):
    assert abs(np.linalg.norm(lift(np.array(x))) - 1) <= 1e-14


def test_total_mass_linear_density():
    g = build_grid(SourceChart.box([0, 0], [1, 1]), 100, {"kind": "expr", "name": "linear"})
    assert abs(total_mass(g) - 0.5) <= 1e-4


def test_total_mass_atoms():
    assert total_mass(AtomicMeasure([[0.0, 0.0], [1.0, 0.0]], [0.25, 0.75])) == 1.0


def test_balance_check():
    g = build_grid(SourceChart.box([0, 0], [1, 1]), 40, {"kind": "expr", "name": "linear"})
    ok, deficit = balance_check(g, AtomicMeasure([[0.5, 0.5]], [0.5]), 1e-3)
    assert ok and abs(deficit) < 1e-3
    m = AtomicMeasure([[0.2, 0.2], [0.8, 0.8]], [0.25 * 1.1, 0.25 * 1.1])
    ok, deficit = balance_check(g, m, 1e-3)
    assert not ok and deficit == pytest.approx(-0.05)
    with pytest.raises(ValueError):
        balance_check(g, m, 0.0)


def test_midpoint_exact_for_linear_density():
    # the midpoint rule integrates affine densities exactly on boxes
    for res in (10, 20, 40):
        g = build_grid(SourceChart.box([0, 0], [1, 1]), res, {"kind": "expr", "name": "linear"})
        assert abs(total_mass(g) - 0.5) <= 1e-14


def test_quadrature_second_order_gaussian():
    exact = (np.sqrt(np.pi) / 2 * erf(1.0)) ** 2  # int_[0,1]^2 exp(-|x|^2)
    dens = {"kind": "expr", "name": "gaussian", "params": {"sigma": np.sqrt(0.5)}}
    errs = [abs(total_mass(build_grid(SourceChart.box([0, 0], [1, 1]), r, dens)) - exact)
            for r in (10, 20, 40, 80)]
    for a, b in zip(errs, errs[1:]):
        assert a / b >= 3.0


def test_quadrature_linear_on_shifted_box_is_exact():
    g = build_grid(SourceChart.box([1, 0.5], [4, 1.5]), 16, {"kind": "expr", "name": "linear"})
    assert g.size == 48 * 16
    assert abs(total_mass(g) - 7.5) <= 1e-12  # mean of x1 over [1,4] times area 3


def test_invalid_charts_and_measures():
    with pytest.raises(ValueError):
        SourceChart.sphere_cap(2, 1.0)
    with pytest.raises(ValueError):
        SourceChart.box([0, 0], [0, 1])
    with pytest.raises(ValueError):
        build_grid(SourceChart.box([0, 0], [1, 1]), 1)
    with pytest.raises(ValueError):
        AtomicMeasure([[0, 0], [0, 0]], [1, 1])
    with pytest.raises(ValueError):
        AtomicMeasure([[0, 0]], [-1])
    with pytest.raises(ValueError):
        make_density({"kind": "expr", "name": "nope"})
    with pytest.raises(ValueError):
        build_grid(SourceChart.box([0, 0], [1, 1]), 4, lambda x: -np.ones(len(x)))


def test_disk_excludes_outside_nodes():
    ch = SourceChart.disk([0.3, -0.2], 0.7)
    g = build_grid(ch, 30)
    assert np.all(ch.contains(g.nodes))
    assert np.all(np.linalg.norm(g.nodes - [0.3, -0.2], axis=1) <= 0.7)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 40), st.floats(0.1, 0.95))
def test_cap_weights_positive_and_bounded(res, r):
    g = build_grid(SourceChart.sphere_cap(2, r), res)
    assert np.all(g.weights > 0)
    assert g.weights.sum() <= cap_area(r) * (1 + 4.0 / res) + np.prod(g.spacing) * 4 * res


def test_neighbor_and_offset_agree():
    g = build_grid(SourceChart.disk([0, 0], 1.0), 12)
    assert np.array_equal(g.neighbor(0, 1), g.offset([1, 0]))
    nb = g.neighbor(1, -1)
    ok = nb >= 0
    assert np.allclose(g.nodes[nb[ok]] - g.nodes[ok], [0, -g.spacing[1]])
