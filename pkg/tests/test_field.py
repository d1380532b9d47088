from fractions import Fraction

import numpy as np
import pytest

from membrane_lab.field import (
    BasisSampler, BiharmonicExtension, FieldSample, coarse_field, coarse_probes,
    conditional_coefficients, conditional_mean, gibbs_markov_covariance_gap,
    gibbs_markov_split, load_snapshot, prepare_sampler, sample, sample_many,
    save_snapshot,
)
from membrane_lab.lattice import (
    DomainError, DyadicCube, PrecisionOperator, hierarchy, make_box, make_dyadic_union,
    make_lattice_box,
)
from membrane_lab.rng import RngStream


def test_conditional_coefficients_four_dimensions():
    # [DERIVED] -A(x,y)/A(x,x) with A(x,x) = 9/8
    c = conditional_coefficients(4)
    assert c[(1, 0, 0, 0)] == Fraction(2, 9)
    assert c[(1, -1, 0, 0)] == Fraction(-1, 36)
    assert c[(0, 0, 2, 0)] == Fraction(-1, 72)
    assert sum(c.values()) == 1


def test_conditional_coefficients_one_dimension():
    # [DERIVED] stencil (1/4, -1, 3/2, -1, 1/4) gives 2/3 and -1/6
    c = conditional_coefficients(1)
    assert c == {(1,): Fraction(2, 3), (-1,): Fraction(2, 3),
                 (2,): Fraction(-1, 6), (-2,): Fraction(-1, 6)}


def test_two_site_extension():
    # [DERIVED] E[h(1) | h(2)] = G(1,2)/G(2,2) h(2) = (4/5)/(6/5) h(2)
    V = make_lattice_box((1,), (2,))
    U = make_lattice_box((1,), (1,))
    phi = conditional_mean(np.array([1.0]), V, U)
    assert phi[0] == pytest.approx(2 / 3, abs=1e-12)


def _exact_cov(sampler):
    M = sampler.from_noise(np.eye(sampler.noise_size))
    return M.T @ M


@pytest.mark.parametrize("method", ["dense", "iterative"])
def test_sampler_covariance_is_exact(method):
    dom = make_box(3, 5)
    op = PrecisionOperator(dom)
    s = prepare_sampler(op, method=method, tol=1e-12)
    G = np.linalg.inv(op.dense())
    np.testing.assert_allclose(_exact_cov(s), G, atol=1e-9)


def test_iterative_sampler_on_union_covariance():
    dom = make_dyadic_union([DyadicCube(1, (0, 0)), DyadicCube(1, (1, 1))], 8)
    op = PrecisionOperator(dom)
    s = prepare_sampler(op, method="iterative", tol=1e-12)
    np.testing.assert_allclose(_exact_cov(s), np.linalg.inv(op.dense()), atol=1e-9)


def test_sampling_is_deterministic_per_stream():
    s = prepare_sampler(PrecisionOperator(make_box(4, 6)))
    root = RngStream(42)
    a = sample_many(s, [root.child(i) for i in range(5)], batch=2)
    again = sample_many(s, [root.child(i) for i in range(5)], batch=2)
    np.testing.assert_array_equal(a, again)
    # batching changes BLAS blocking only
    b = sample_many(s, [root.child(i) for i in range(5)], batch=5)
    np.testing.assert_allclose(a, b, atol=1e-12)
    c = sample(s, root.child(3))
    np.testing.assert_allclose(c.values, a[3], atol=1e-12)
    assert not np.array_equal(a[0], a[1])


def test_basis_sampler_reconstructs_green():
    op = PrecisionOperator(make_lattice_box((1, 1, 1, 1), (4, 4, 4, 4)))
    bs = BasisSampler(op)
    np.testing.assert_allclose(bs.gram(), np.eye(op.n), atol=1e-10)
    np.testing.assert_allclose(bs.covariance(), np.linalg.inv(op.dense()), atol=1e-9)


def test_basis_sampler_size_limit():
    with pytest.raises(DomainError):
        BasisSampler(PrecisionOperator(make_box(4, 8)), max_points=100)


def test_gibbs_markov_gap_small_boxes():
    V = make_box(3, 8)
    U = make_lattice_box((2, 2, 2), (5, 5, 5))
    assert gibbs_markov_covariance_gap(V, U) <= 1e-10


def test_gibbs_markov_split_supports():
    V = make_box(3, 7)
    U = make_lattice_box((2, 2, 2), (4, 4, 4))
    inner, phi = gibbs_markov_split(V, U, RngStream(1))
    in_U = np.zeros(V.size, bool)
    in_U[V.indices_of(U.points)] = True
    assert np.all(inner.values[~in_U] == 0)
    assert np.any(inner.values[in_U] != 0)
    ext = BiharmonicExtension(V, U)
    assert ext.bilaplacian_defect(phi.values[~in_U], phi.values[in_U]) <= 1e-8


def test_coarse_probe_matches_extension_solve():
    V = make_box(4, 16)
    x = (8, 8, 8, 8)
    hier = hierarchy(V, x)
    h = prepare_sampler(PrecisionOperator(V)).sample_values([RngStream(3)])[0]
    probe = coarse_probes(V, x, [1], levels="radius", hier=hier, tol=1e-11)[0]
    box = hier.level_box(1)
    U = make_lattice_box(box.lo, box.hi)
    ext = BiharmonicExtension(V, U, tol=1e-11)
    direct = ext.full(h)[V.index_of(x)]
    assert float(probe(h)) == pytest.approx(direct, abs=1e-8)


def test_coarse_field_endpoints():
    V = make_box(4, 8)
    h = prepare_sampler(PrecisionOperator(V)).sample_values([RngStream(9)])[0]
    cf = coarse_field(FieldSample(V, h), (4, 4, 4, 4), [0])
    assert cf[0] == pytest.approx(h[V.index_of((4, 4, 4, 4))])


def test_snapshot_round_trip(tmp_path):
    s = prepare_sampler(PrecisionOperator(make_box(3, 5)))
    f = sample(s, RngStream(11, ("snap",)))
    path = save_snapshot(f, tmp_path / "h.mlfs")
    back = load_snapshot(path)
    np.testing.assert_array_equal(back.values, f.values)
    np.testing.assert_array_equal(back.domain.points, f.domain.points)
    assert back.provenance == f.provenance


def test_snapshot_rejects_garbage(tmp_path):
    p = tmp_path / "bad.mlfs"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_snapshot(p)


def test_three_site_extension_one_dimension():
    # [DERIVED] V={1,2,3}, U={2}, h1=1, h3=0: phi(2) = (1 * 1 + 1 * 0) / (3/2)
    V = make_lattice_box((1,), (3,))
    phi = conditional_mean(np.array([1.0, 0.0]), V, make_lattice_box((2,), (2,)))
    assert phi[0] == pytest.approx(2 / 3, abs=1e-12)


def test_single_point_sample_moments():
    dom = make_lattice_box((0,) * 4, (0,) * 4)
    s = prepare_sampler(PrecisionOperator(dom))
    root = RngStream(8)
    x = sample_many(s, [root.child(i) for i in range(10_000)], batch=1000)[:, 0]
    n = x.size
    var = x.var(ddof=1)
    assert abs(var - 8 / 9) <= 3 * (8 / 9) * np.sqrt(2 / (n - 1))
    assert abs(x.mean()) <= 3 * np.sqrt(8 / 9 / n)


def test_basis_and_factor_samplers_agree():
    op = PrecisionOperator(make_box(3, 6))
    root = RngStream(12)
    a = BasisSampler(op).sample_values([root.child("b", i) for i in range(4000)])
    b = sample_many(prepare_sampler(op), [root.child("f", i) for i in range(4000)])
    i = op.domain.index_of((3, 3, 3))
    va, vb = a[:, i].var(), b[:, i].var()
    g = np.linalg.inv(op.dense())[i, i]
    assert abs(va - vb) <= 3 * g * np.sqrt(2 / 4000) * np.sqrt(2)


def test_coarse_increments_uncorrelated():
    V = make_box(4, 12)
    x = (6, 6, 6, 6)
    hier = hierarchy(V, x)
    p0, p1, p2 = coarse_probes(V, x, [0, 1, 2], levels="radius", hier=hier)
    h = sample_many(prepare_sampler(PrecisionOperator(V)),
                    [RngStream(21).child(i) for i in range(3000)], batch=100)
    u, v = p0(h) - p1(h), p1(h) - p2(h)
    r = np.corrcoef(u, v)[0, 1]
    assert abs(r) <= 3 / np.sqrt(len(u))
