import math

import numpy as np
import pytest
from scipy.special import ndtr

from membrane_lab.field import FieldSample
from membrane_lab.lattice import DomainError, make_box
from membrane_lab.levelset import (
    CountTally, InsufficientDataError, K_closed_form, ProductTest, build_eta,
    canonical_level, exact_count_mean, extract_level_set, integrate, predicted_moment,
    region_mask, scaling_params, tail_checks, tail_report, truncation_check,
    truncation_event,
)

# [DERIVED] lambda=0.5, N=100: a = 4 ln 100 / pi, K = 100^3 / sqrt(ln 100),
# k_N = floor(ln K / 8) = floor(13.05 / 8)
A_100 = 5.863484791035423
K_100 = 465990.6017846561


def test_scaling_params_oracle():
    p = scaling_params(0.5, 100)
    assert p.a_N == pytest.approx(A_100, rel=1e-13)
    assert p.K_N == pytest.approx(K_100, rel=1e-12)
    assert p.k_N == 1
    assert p.a_N * math.pi / (8 * math.log(100)) == pytest.approx(0.5, rel=1e-14)


def test_closed_form_agrees_at_canonical_level():
    for lam in (0.1, 0.3, 0.5, 0.9):
        for N in (8, 16, 1000):
            assert scaling_params(lam, N).K_N == pytest.approx(K_closed_form(lam, N), rel=1e-12)


def test_override_level_changes_K():
    p = scaling_params(0.5, 100, a_override=A_100 + 1.0)
    assert p.K_N < K_100


@pytest.mark.parametrize("lam", [0.0, 1.0, -0.2])
def test_scaling_params_rejects_lambda(lam):
    with pytest.raises(ValueError):
        scaling_params(lam, 16)


def test_extract_and_eta():
    dom = make_box(1, 6)
    params = scaling_params(0.5, 6)
    a = params.a_N
    h = FieldSample(dom, np.array([a - 1, a, a + 0.25, a - 0.1, a + 2.0]))
    ls = extract_level_set(h, params, 0.0)
    np.testing.assert_array_equal(ls.points.ravel(), [2, 3, 5])
    assert len(extract_level_set(h, params, 0.5).indices) == 1
    eta = build_eta(h, params, min_height=0.0)
    assert eta.n_atoms == 3
    assert eta.weight == pytest.approx(1 / params.K_N)
    np.testing.assert_allclose(eta.positions.ravel(), [2 / 6, 3 / 6, 5 / 6])
    np.testing.assert_allclose(eta.heights, [0.0, 0.25, 2.0])
    f = ProductTest((0.4,), (1.0,), 0.1, 5.0)
    assert integrate(eta, f) == pytest.approx(2 / params.K_N)


def test_truncation_band():
    n, kN, a = 4, 1, 4.0
    line = {k: a * (n - k) / n for k in range(n + 1)}
    assert truncation_check(line, n, kN, a, M=0.1)
    off = dict(line)
    off[2] += 2.0
    # band at k=2 is M * 2^(3/4)
    assert not truncation_check(off, n, kN, a, M=1.0)
    assert truncation_check(off, n, kN, a, M=1.2)
    assert truncation_check({**line, n: 99.0}, n, kN, a, M=0.1)


def test_truncation_event_on_small_box():
    # N=8: k_N = 0 = n(x), only the trivial endpoint remains
    dom = make_box(4, 8)
    params = scaling_params(0.5, 8)
    assert params.k_N == 0
    h = FieldSample(dom, np.zeros(dom.size))
    rec = truncation_event(h, (4, 4, 4, 4), 1.0, params)
    assert rec.passed and rec.path == {0: 0.0}


def test_exact_count_mean_unit_variance():
    params = scaling_params(0.5, 16)
    g = np.ones(10)
    assert exact_count_mean(params, g) == pytest.approx(10 * ndtr(-params.a_N))


def test_predicted_moment_flat_correction():
    # [DERIVED] s_D = 0: integral is the node count 7^4 over 16^4
    dom = make_box(4, 16)
    params = scaling_params(0.5, 16)
    region = ((0.25,) * 4, (0.75,) * 4)
    assert region_mask(dom, 16, *region).sum() == 2401
    got = predicted_moment(region, 0.0, params, np.zeros(dom.size), dom)
    expect = 1 / (4 * 0.5 * math.sqrt(math.pi)) * 2401 / 16**4 * params.K_N
    assert got == pytest.approx(expect, rel=1e-12)
    shifted = predicted_moment(region, 1.0, params, np.zeros(dom.size), dom)
    assert shifted / got == pytest.approx(math.exp(-math.pi * 0.5), rel=1e-12)
    with pytest.raises(DomainError):
        predicted_moment(((0.0,) * 4, (0.5,) * 4), 0.0, params, np.zeros(dom.size), dom)


def test_tail_report_on_synthetic_rows():
    params = scaling_params(0.3, 16)
    rng = np.random.default_rng(0)
    rows = []
    for _ in range(200):
        r = np.full(50, -10.0)
        k = rng.poisson(5)
        r[:k] = params.a_N + rng.exponential(1 / 0.9, k)
        rows.append(r)
    rep = tail_checks(rows, params, b_list=(0.5,))
    assert abs(rep.overshoot_rate - 0.9) < 4 * rep.rate_stderr
    ratio = rep.ratio_table[1]
    assert abs(ratio["ratio"] - math.exp(-0.45)) < 4 * ratio["stderr"]


def test_tail_needs_data():
    params = scaling_params(0.3, 16)
    with pytest.raises(InsufficientDataError):
        tail_report(CountTally(params, (0.0,)))
    with pytest.raises(ValueError):
        tail_checks([np.zeros(5)] * 10, params)


def test_canonical_level_linear_in_lambda():
    assert canonical_level(0.6, 50) == pytest.approx(2 * canonical_level(0.3, 50))


def test_level_sets_shrink_with_shift():
    dom = make_box(4, 6)
    params = scaling_params(0.3, 6)
    h = FieldSample(dom, np.random.default_rng(4).standard_normal(dom.size) * 1.5)
    prev = None
    for b in (-1.0, 0.0, 0.5, 1.0):
        cur = set(extract_level_set(h, params, b).indices.tolist())
        if prev is not None:
            assert cur <= prev
        prev = cur


def test_truncated_atoms_are_a_subset():
    from membrane_lab.field import prepare_sampler
    from membrane_lab.lattice import PrecisionOperator
    from membrane_lab.rng import RngStream

    dom = make_box(4, 12)
    params = scaling_params(0.3, 12)
    vals = prepare_sampler(PrecisionOperator(dom)).sample_values([RngStream(2)])[0]
    h = FieldSample(dom, vals)
    full = build_eta(h, params, min_height=0.0)
    cut = build_eta(h, params, M=0.5, min_height=0.0)
    assert set(cut.indices.tolist()) <= set(full.indices.tolist())


def test_planted_overshoot_rate_within_two_se():
    params = scaling_params(0.5, 16)
    x = np.random.default_rng(10).exponential(1 / 1.57, (100, 20))
    rep = tail_checks(list(params.a_N + x), params)
    assert abs(rep.overshoot_rate - 1.57) <= 2 * rep.rate_stderr
