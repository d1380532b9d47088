import math

import numpy as np
import pytest

from membrane_lab.green import (
    GAMMA, center_point, coarse_cov, estimate_sD, fit_gamma, green_columns,
    green_diagonal, lattice_point, orbit_representatives, solve_green_column,
    symmetry_defect, uniform_bound_monitor,
)
from membrane_lab.lattice import (
    DomainError, DyadicCube, LatticeDomain, PrecisionOperator, make_box,
    make_dyadic_union, make_lattice_box,
)
from membrane_lab.solvers import LinearSolver, SolverError, pcg


def test_gamma_constant():
    assert GAMMA == pytest.approx(0.8105694691387022, rel=1e-15)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_single_point_green(d):
    # [DERIVED] A = 1 + 1/(2d) at one site, so G = 2d / (2d + 1); d=4 gives 8/9
    dom = LatticeDomain(d, np.zeros((1, d), int))
    g = solve_green_column(PrecisionOperator(dom), (0,) * d)
    assert g.values[0] == pytest.approx(2 * d / (2 * d + 1), abs=1e-12)


def test_two_site_green_one_dimension():
    # [DERIVED] inverse of [[3/2, -1], [-1, 3/2]] is [[6/5, 4/5], [4/5, 6/5]]
    dom = make_lattice_box((1,), (2,))
    cols = green_columns(PrecisionOperator(dom), [(1,), (2,)])
    np.testing.assert_allclose(cols[0].values, [1.2, 0.8], atol=1e-12)
    np.testing.assert_allclose(cols[1].values, [0.8, 1.2], atol=1e-12)


@pytest.mark.parametrize("method", ["dense", "iterative"])
def test_green_residual_and_symmetry(method):
    dom = make_box(4, 8)
    op = PrecisionOperator(dom)
    src = [(2, 3, 4, 5), (4, 4, 4, 4), (1, 1, 6, 2)]
    cols = green_columns(op, src, tol=1e-10, method=method)
    for c in cols:
        e = np.zeros(dom.size)
        e[dom.index_of(c.source)] = 1.0
        assert np.abs(op.apply(c.values) - e).max() <= 1e-9
    assert symmetry_defect(cols) <= 1e-8


def test_dense_and_iterative_agree():
    dom = make_dyadic_union([DyadicCube(1, (0, 0, 0, 0)), DyadicCube(1, (1, 0, 0, 0))], 8)
    op = PrecisionOperator(dom)
    b = np.random.default_rng(1).standard_normal((2, dom.size))
    xd, _ = LinearSolver(op, method="dense").solve(b)
    xi, res = LinearSolver(op, method="iterative", tol=1e-11).solve(b)
    assert res.max() <= 1e-11
    np.testing.assert_allclose(xi, xd, atol=1e-9)


def test_pcg_reports_failure():
    op = PrecisionOperator(make_box(4, 8))
    b = np.ones((1, op.n))
    with pytest.raises(SolverError) as err:
        pcg(op, b, tol=1e-14, maxiter=2)
    assert err.value.iterations == 2


def test_diagonal_matches_dense_inverse():
    dom = make_box(4, 8)
    ref = np.linalg.inv(PrecisionOperator(dom).dense())
    pts = np.array([(4, 4, 4, 4), (1, 2, 3, 4), (7, 7, 1, 1)])
    got = green_diagonal(dom, pts, use_symmetry=True)
    np.testing.assert_allclose(got, ref[dom.indices_of(pts), dom.indices_of(pts)], rtol=1e-10)


def test_orbit_representatives_of_box_center_and_corners():
    dom = make_box(4, 8)
    corners = np.array([[1, 1, 1, 1], [7, 7, 7, 7], [1, 7, 1, 7], [4, 4, 4, 4]])
    reps, inv = orbit_representatives(dom, corners)
    assert len(reps) == 2
    assert inv[0] == inv[1] == inv[2] != inv[3]


def test_green_diagonal_increases_with_domain():
    small = green_diagonal(make_box(4, 8), [(4,) * 4])[0]
    big = green_diagonal(make_lattice_box((-3,) * 4, (11,) * 4), [(4,) * 4])[0]
    assert big > small


def test_fit_gamma_recovers_exact_slope():
    sizes = [8, 16, 32, 64]
    vals = [GAMMA * math.log(n) + 0.3 for n in sizes]
    fit = fit_gamma(sizes, values=vals)
    assert fit.slope == pytest.approx(GAMMA, abs=1e-12)
    assert fit.stderr == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_gamma([8, 16])


def test_center_green_values_grow_like_log():
    vals = [green_diagonal(make_box(4, n), [center_point(n)])[0] for n in (8, 12)]
    assert 0.5 * GAMMA * math.log(1.5) < vals[1] - vals[0] < 1.5 * GAMMA * math.log(1.5)


def test_estimate_sD_rejects_boundary_points():
    D = {"dim": 4, "kind": "box", "side": 12}
    with pytest.raises(DomainError):
        estimate_sD(D, 12, (0.05, 0.5, 0.5, 0.5))
    s = estimate_sD(D, 12, (0.5,) * 4)
    assert s == pytest.approx(green_diagonal(make_box(4, 12), [(6,) * 4])[0] - GAMMA * math.log(12))


def test_lattice_point_floor():
    dom = make_box(4, 8)
    assert lattice_point(dom, 8, (0.5, 0.3, 0.99, 0.01)) == (4, 2, 7, 1)


def test_coarse_cov_positive_for_nested_domains():
    D = [DyadicCube(0, (0, 0, 0, 0))]
    inner = [DyadicCube(1, (0, 0, 0, 0))]
    c = coarse_cov(D, inner, 16, (0.25,) * 4, (0.25,) * 4)
    assert c > 0


def test_uniform_bound_monitor_reports_rows():
    dom = make_box(4, 8)
    rep = uniform_bound_monitor(dom, 8, [((4,) * 4, (4,) * 4), ((3, 4, 4, 4), (4,) * 4)])
    assert len(rep.rows) == 2
    assert rep.max_residual == max(r["residual"] for r in rep.rows)
