import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coxcov.geometry import (GeometryError, Grid, NodeIndex, Window,
                             build_partition, locate)


def test_window_volume_and_sides():
    w = Window(dim_D=2, volume_n=64.0)
    assert w.side == pytest.approx(8.0)
    assert w.half_side == pytest.approx(4.0)
    with pytest.raises(GeometryError):
        Window(dim_D=0, volume_n=1.0)


def test_grid_cell_volume_identity():
    g = Grid(Window(dim_D=2, volume_n=100.0), cells_per_axis=5)
    assert g.total_cells == 25
    assert g.cell_volume * g.total_cells == pytest.approx(100.0)
    centers = g.cell_centers()
    assert centers.shape == (25, 2)
    assert abs(centers).max() < g.window.half_side


def test_cell_index_roundtrip():
    g = Grid(Window(dim_D=2, volume_n=16.0), cells_per_axis=4)
    centers = g.cell_centers()
    idx = g.cell_index_of(centers)
    assert np.array_equal(idx, np.arange(16))
    with pytest.raises(GeometryError):
        g.cell_index_of(np.array([[100.0, 0.0]]))


def test_node_index_relations():
    n = NodeIndex((0, 1, 1))
    assert n.level == 3
    assert n.code == 3
    assert n.parent().bits == (0, 1)
    assert n.twin().bits == (0, 1, 0)
    assert n.child(0).bits == (0, 1, 1, 0)
    assert NodeIndex.from_code(3, 3).bits == (0, 1, 1)


def test_build_partition_level1_bins():
    t = build_partition(1, 1)
    bounds = [t.bin_bounds(n) for n in t.nodes(1)]
    assert bounds[0][0][0] == 0.0 and bounds[0][1][0] == 0.5
    assert bounds[1][0][0] == 0.5 and bounds[1][1][0] == 1.0


def test_build_partition_d2_level2_squares():
    t = build_partition(2, 2)
    for node in t.nodes(2):
        lo, hi = t.bin_bounds(node)
        assert np.allclose(hi - lo, 0.5)
        assert t.bin_diameter(node) == pytest.approx(0.5 * np.sqrt(2))
        assert t.bin_diameter(node) <= t.diam_constant * 2 ** (-2 / 2)


def test_build_partition_deep_dyadic():
    t = build_partition(1, 10)
    lo, hi = t.bin_bounds(NodeIndex.from_code(10, 517))
    assert (hi - lo)[0] == pytest.approx(2.0**-10)


def test_node_budget_rejected():
    with pytest.raises(GeometryError):
        build_partition(1, 30)


def test_locate_examples():
    t = build_partition(1, 2)
    path = locate(t, 0.3)
    assert [n.bits for n in path] == [(0,), (0, 1)]
    t1 = build_partition(1, 1)
    assert locate(t1, 1.0)[0].bits == (1,)
    t2 = build_partition(2, 2)
    assert [n.bits for n in locate(t2, [0.7, 0.2])] == [(1,), (1, 0)]


def test_locate_rejects_outside():
    t = build_partition(1, 2)
    with pytest.raises(GeometryError):
        locate(t, 1.5)
    with pytest.raises(GeometryError):
        locate(t, -0.1)


def test_diameter_bound_all_nodes():
    for d in (1, 2, 3):
        t = build_partition(d, 6)
        for lev in range(1, 7):
            bound = t.diam_constant * 2.0 ** (-lev / d)
            worst = max(t.bin_diameter(n) for n in t.nodes(lev))
            assert worst <= bound + 1e-12


def test_partition_is_exhaustive_and_disjoint():
    rng = np.random.default_rng(0)
    t = build_partition(2, 5)
    Z = rng.uniform(size=(10_000, 2))
    codes = t.leaf_codes(Z)
    # locate path membership at every level
    for node_level in (1, 3, 5):
        level_codes = codes >> (5 - node_level)
        for i in rng.choice(len(Z), size=50, replace=False):
            node = NodeIndex.from_code(node_level, int(level_codes[i]))
            assert t.contains(node, Z[i])
    # every point in exactly one bin per level: counts add to the total
    for lev in (1, 2, 5):
        hist = np.bincount(codes >> (5 - lev), minlength=2**lev)
        assert hist.sum() == len(Z)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=2),
       st.integers(min_value=1, max_value=6))
def test_locate_membership_property(z, level):
    t = build_partition(2, level)
    for node in locate(t, z):
        assert t.contains(node, np.asarray(z))


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**8 - 1))
def test_code_bits_roundtrip(code):
    node = NodeIndex.from_code(8, code)
    assert node.code == code
    assert node.level == 8
