from fractions import Fraction

import numpy as np
import pytest

from membrane_lab.lattice import (
    DomainError, DyadicCube, LatticeDomain, PrecisionOperator, bilaplacian_stencil,
    boundary2, domain_from_json, hierarchy, laplacian_stencil, make_box,
    make_dyadic_union, make_lattice_box,
)

# [DERIVED] hand composition of the normalized Laplacian with itself.
# d=4: centre 1 + 8/64, neighbour -2/8, e_i±e_j 2/64, 2e_i 1/64.
D4_COEFFS = {"centre": Fraction(9, 8), "neighbour": Fraction(-1, 4),
             "diagonal": Fraction(1, 32), "double": Fraction(1, 64)}
# d=2: centre 1 + 4/16, neighbour -2/4, diagonal 2/16, double 1/16.
D2_COEFFS = {"centre": Fraction(5, 4), "neighbour": Fraction(-1, 2),
             "diagonal": Fraction(1, 8), "double": Fraction(1, 16)}


def _classes(d):
    e = np.eye(d, dtype=int)
    return {"centre": (0,) * d, "neighbour": tuple(e[0]),
            "diagonal": tuple(e[0] - e[1]), "double": tuple(2 * e[0])}


@pytest.mark.parametrize("d,expected", [(4, D4_COEFFS), (2, D2_COEFFS)])
def test_bilaplacian_coefficients(d, expected):
    st = bilaplacian_stencil(d)
    for name, offset in _classes(d).items():
        assert st[offset] == expected[name]
    assert sum(st.entries.values()) == 0


def test_stencil_term_count_and_symmetry():
    st = bilaplacian_stencil(4)
    # 1 centre, 8 neighbours, 8 double steps, 24 diagonal steps
    assert len(st.entries) == 41
    for o, c in st.entries.items():
        assert st[tuple(-v for v in o)] == c


def test_laplacian_rows_sum_to_zero():
    for d in (1, 2, 3, 4):
        assert sum(laplacian_stencil(d).entries.values()) == 0


def test_box_counts():
    assert make_box(4, 8).size == 7**4
    assert make_box(2, 5).size == 16
    with pytest.raises(DomainError):
        make_box(4, 1)


def test_dyadic_half_cube_is_lattice_box():
    # (0, 1/2)^4 at N=16 -> integer points 1..7 on each axis
    dom = make_dyadic_union([DyadicCube(1, (0, 0, 0, 0))], 16)
    ref = make_lattice_box((1,) * 4, (7,) * 4)
    assert dom.size == 2401
    np.testing.assert_array_equal(dom.points, ref.points)


def test_dyadic_union_drops_shared_faces():
    cubes = [DyadicCube(1, (0, 0)), DyadicCube(1, (1, 0))]
    dom = make_dyadic_union(cubes, 8)
    # two 3x3 blocks, the column x=4 is excluded
    assert dom.size == 18
    assert not dom.contains((4, 2))


def test_dyadic_union_rejects_overlap_and_misalignment():
    with pytest.raises(DomainError):
        make_dyadic_union([DyadicCube(0, (0, 0)), DyadicCube(1, (0, 0))], 8)
    with pytest.raises(DomainError):
        make_dyadic_union([DyadicCube(3, (0, 0))], 8)


def test_descriptor_round_trip():
    for dom in (make_box(3, 6), make_dyadic_union([DyadicCube(1, (1, 0, 1))], 8),
                make_lattice_box((2, 3), (5, 4))):
        back = domain_from_json(dom.to_json())
        np.testing.assert_array_equal(back.points, dom.points)


def test_boundary_layer_of_single_point():
    # d=1: {-2,-1,1,2}; d=2: 4 at distance one plus 8 at distance two
    assert len(boundary2(LatticeDomain(1, np.array([[0]])))) == 4
    assert len(boundary2(LatticeDomain(2, np.array([[0, 0]])))) == 12


def test_precision_two_sites_in_one_dimension():
    # [DERIVED] d=1 stencil: 3/2 on the diagonal, -1 between neighbours
    A = PrecisionOperator(make_lattice_box((1,), (2,))).dense()
    np.testing.assert_allclose(A, [[1.5, -1.0], [-1.0, 1.5]], atol=1e-15)


def test_precision_matches_stencil_rows():
    dom = make_box(4, 6)
    op = PrecisionOperator(dom)
    st = bilaplacian_stencil(4)
    A = op.sparse
    i = dom.index_of((3, 3, 3, 3))
    row = A.getrow(i).toarray().ravel()
    for o, c in st.entries.items():
        j = dom.index_of(tuple(3 + v for v in o))
        assert row[j] == pytest.approx(float(c), abs=1e-15)


def test_apply_matches_sparse():
    dom = make_dyadic_union([DyadicCube(1, (0, 0, 0)), DyadicCube(1, (1, 1, 0))], 8)
    op = PrecisionOperator(dom)
    v = np.random.default_rng(3).standard_normal((2, dom.size))
    np.testing.assert_allclose(op.apply(v), (op.sparse @ v.T).T, atol=1e-13)


def test_inner_product_is_quadratic_form():
    op = PrecisionOperator(make_box(3, 6))
    rng = np.random.default_rng(5)
    f, g = rng.standard_normal((2, op.n))
    assert op.inner(f, g) == pytest.approx(f @ op.apply(g), rel=1e-12)


def test_hierarchy_levels():
    assert hierarchy(make_box(4, 8), (4, 4, 4, 4)).n_x == 0
    # clearance 15: floor(e^2)=7 fits, floor(e^3)=20 does not
    h = hierarchy(make_box(4, 32), (16,) * 4)
    assert h.n_x == 1 and h.clearance == 15
    assert h.box(0) is None
    assert h.box(1).size == 31**4


def test_hierarchy_rejects_outside_point():
    with pytest.raises(DomainError):
        hierarchy(make_box(4, 8), (0, 4, 4, 4))
