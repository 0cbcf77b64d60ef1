import numpy as np
import pytest

from r2roc.grids import (
    Grid1D,
    Grid2D,
    RestrictionMap,
    apply_dx_central,
    apply_dxx,
    apply_laplacian_5pt,
    build_grid_1d,
    build_grid_2d,
    restrict,
)


def test_grid_1d_basic():
    g = build_grid_1d(-1.0, 1.0, 3)
    assert g.h == pytest.approx(0.5)
    np.testing.assert_allclose(g.nodes, [-1.0, -0.5, 0.0, 0.5, 1.0])
    assert g.num_nodes == 5
    assert np.all(np.diff(g.nodes) > 0)


def test_grid_1d_paper_size():
    g = build_grid_1d(-1.0, 1.0, 100)
    assert g.h == pytest.approx(2.0 / 101)
    assert g.num_nodes == 102


def test_grid_1d_smallest():
    g = build_grid_1d(0.0, 1.0, 1)
    np.testing.assert_allclose(g.nodes, [0.0, 0.5, 1.0])


def test_grid_1d_invalid():
    with pytest.raises(ValueError):
        build_grid_1d(-1.0, 1.0, 0)
    with pytest.raises(ValueError):
        build_grid_1d(1.0, -1.0, 10)


def test_grid_2d_index_map():
    g = build_grid_2d((-1.0, 1.0), (0.0, 2.0), 3, 4)
    assert g.num_nodes == 5 * 6
    assert g.interior.size == 3 * 4
    # bijection between (i, j) pairs and flat interior indices
    pairs = [(i, j) for i in range(1, 4) for j in range(1, 5)]
    flat = [g.flat_index(i, j) for i, j in pairs]
    assert sorted(flat) == sorted(set(flat))
    np.testing.assert_array_equal(np.sort(g.interior), np.sort(flat))


def test_dx_central_exact_for_linear():
    g = build_grid_1d(-1.0, 1.0, 17)
    out = apply_dx_central(g.nodes.copy(), g)
    np.testing.assert_allclose(out[g.interior], 1.0, atol=1e-14)
    assert out[0] == out[-1] == 0.0


def test_dx_central_symmetry_at_zero():
    g = build_grid_1d(-1.0, 1.0, 3)  # h = 0.5, node 2 is x = 0
    out = apply_dx_central(g.nodes**2, g)
    assert out[2] == 0.0


def test_dx_central_second_order():
    # refinement study against the exact derivative 3 x^2
    errs = []
    for k in (40, 80, 160):
        g = build_grid_1d(-1.0, 1.0, k)
        out = apply_dx_central(g.nodes**3, g)
        errs.append(np.max(np.abs(out[g.interior] - 3 * g.nodes[g.interior] ** 2)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) < 0.2)


def test_dxx_exact_for_quadratic():
    g = build_grid_1d(-1.0, 1.0, 9)
    out = apply_dxx(g.nodes**2, g)
    np.testing.assert_allclose(out[g.interior], 2.0, atol=1e-12)
    out_c = apply_dxx(np.full(g.num_nodes, 3.7), g)
    np.testing.assert_allclose(out_c, 0.0, atol=1e-12)


def test_dxx_second_order():
    errs = []
    for k in (40, 80, 160):
        g = build_grid_1d(-1.0, 1.0, k)
        out = apply_dxx(np.sin(np.pi * g.nodes), g)
        exact = -np.pi**2 * np.sin(np.pi * g.nodes[g.interior])
        errs.append(np.max(np.abs(out[g.interior] - exact)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) < 0.2)


def test_laplacian_5pt_exact_for_quadratic():
    g = build_grid_2d((-1.0, 1.0), (-1.0, 1.0), 7, 5)
    x1, x2 = g.coords()
    out = apply_laplacian_5pt(x1**2 + x2**2, g)
    np.testing.assert_allclose(out[g.interior], 4.0, atol=1e-12)
    np.testing.assert_allclose(apply_laplacian_5pt(np.ones(g.num_nodes), g), 0.0, atol=1e-13)


def test_laplacian_5pt_second_order():
    errs = []
    for k in (16, 32, 64):
        g = build_grid_2d((-1.0, 1.0), (-1.0, 1.0), k, k)
        x1, x2 = g.coords()
        u = np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
        out = apply_laplacian_5pt(u, g)
        exact = -8 * np.pi**2 * u[g.interior]
        errs.append(np.max(np.abs(out[g.interior] - exact)))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 2.0) < 0.2)


def test_difference_operators_linear():
    rng = np.random.default_rng(7)
    g = build_grid_1d(0.0, 2.0, 31)
    u, v = rng.normal(size=(2, g.num_nodes))
    a, b = 1.3, -0.7
    for op in (apply_dx_central, apply_dxx):
        lhs = op(a * u + b * v, g)
        rhs = a * op(u, g) + b * op(v, g)
        np.testing.assert_allclose(lhs, rhs, atol=1e-11)
    g2 = build_grid_2d((0.0, 1.0), (0.0, 1.0), 9, 11)
    u2, v2 = rng.normal(size=(2, g2.num_nodes))
    lhs = apply_laplacian_5pt(a * u2 + b * v2, g2)
    rhs = a * apply_laplacian_5pt(u2, g2) + b * apply_laplacian_5pt(v2, g2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_restrict_basic():
    rmap = RestrictionMap(np.array([1, 3]), num_nodes=5)
    out = restrict(np.array([3.0, 1.0, 4.0, 1.0, 5.0]), rmap)
    np.testing.assert_array_equal(out, [1.0, 1.0])


def test_restrict_identity():
    field = np.arange(8.0)
    rmap = RestrictionMap(np.arange(8), num_nodes=8)
    np.testing.assert_array_equal(restrict(field, rmap), field)


def test_restrict_validation():
    with pytest.raises(ValueError):
        RestrictionMap(np.array([0, 0]), num_nodes=4)
    with pytest.raises(ValueError):
        RestrictionMap(np.array([5]), num_nodes=4)
    rmap = RestrictionMap(np.array([2]), num_nodes=4)
    with pytest.raises(ValueError):
        restrict(np.zeros(3), rmap)


def test_restrict_commutes_with_combination():
    rng = np.random.default_rng(11)
    W = rng.normal(size=(40, 6))
    c = rng.normal(size=6)
    idx = np.array([3, 17, 5, 29])
    rmap = RestrictionMap(idx, num_nodes=40)
    full_then_restrict = restrict(W @ c, rmap)
    restrict_then_combine = W[idx, :] @ c
    np.testing.assert_array_equal(full_then_restrict, restrict_then_combine)
