import json
import math

import numpy as np
from hypothesis import given, settings, strategies as st

from membrane_lab import harness
from membrane_lab.field import conditional_coefficients, gibbs_markov_covariance_gap
from membrane_lab.green import green_diagonal
from membrane_lab.lattice import LatticeDomain, PrecisionOperator, bilaplacian_stencil
from membrane_lab.levelset import K_closed_form, scaling_params, truncation_check
from membrane_lab.rng import RngStream
from membrane_lab.stats import fit_line

SETTINGS = settings(max_examples=30, deadline=None)


@st.composite
def point_sets(draw, dim=2, side=6, min_size=2, max_size=20):
    cells = draw(st.sets(st.tuples(*[st.integers(0, side - 1)] * dim),
                         min_size=min_size, max_size=max_size))
    return LatticeDomain(dim, np.array(sorted(cells)))


@SETTINGS
@given(st.integers(1, 5))
def test_stencil_sums_to_zero_and_is_even(d):
    s = bilaplacian_stencil(d)
    assert sum(s.entries.values()) == 0
    assert all(s[tuple(-v for v in o)] == c for o, c in s.entries.items())
    assert sum(conditional_coefficients(d).values()) == 1


@SETTINGS
@given(point_sets(), st.integers(0, 2**32 - 1))
def test_precision_symmetric_positive(dom, seed):
    op = PrecisionOperator(dom)
    f, g = np.random.default_rng(seed).standard_normal((2, dom.size))
    assert math.isclose(f @ op.apply(g), g @ op.apply(f), rel_tol=1e-12, abs_tol=1e-12)
    assert f @ op.apply(f) > 0
    assert math.isclose(f @ op.apply(g), op.inner(f, g), rel_tol=1e-10, abs_tol=1e-12)


@SETTINGS
@given(point_sets(min_size=3), st.data())
def test_green_diagonal_monotone_in_domain(dom, data):
    keep = data.draw(st.lists(st.booleans(), min_size=dom.size, max_size=dom.size))
    keep = np.array(keep)
    keep[0] = True
    sub = dom.subdomain(keep)
    big = green_diagonal(dom, sub.points, use_symmetry=False)
    small = green_diagonal(sub, sub.points, use_symmetry=False)
    assert np.all(big >= small - 1e-10)


@SETTINGS
@given(point_sets(min_size=3), st.data())
def test_gibbs_markov_identity_any_subset(dom, data):
    keep = np.array(data.draw(st.lists(st.booleans(), min_size=dom.size, max_size=dom.size)))
    keep[0] = True
    keep[-1] = False
    assert gibbs_markov_covariance_gap(dom, dom.points[keep]) <= 1e-9


@SETTINGS
@given(st.floats(0.01, 0.99), st.integers(3, 10**6))
def test_K_closed_form_identity(lam, N):
    p = scaling_params(lam, N)
    assert math.isclose(p.K_N, K_closed_form(lam, N), rel_tol=1e-9)
    assert math.isclose(p.a_N * math.pi / (8 * math.log(N)), lam, rel_tol=1e-12)
    assert p.k_N >= 0


@SETTINGS
@given(st.integers(1, 12), st.floats(0.1, 20.0), st.floats(0.01, 5.0))
def test_linear_path_is_always_truncated(n, a, M):
    path = {k: a * (n - k) / n for k in range(n + 1)}
    assert truncation_check(path, n, 0, a, M)


@SETTINGS
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_dumps_round_trips_floats(x):
    assert json.loads(harness.dumps([x]))[0] == x


@SETTINGS
@given(st.integers(0, 2**63 - 1), st.lists(st.integers(0, 1000), max_size=3))
def test_stream_reproducible(seed, tags):
    s = RngStream(seed, tuple(tags))
    a = s.generator().standard_normal(3)
    b = RngStream(seed, tuple(tags)).generator().standard_normal(3)
    assert np.array_equal(a, b)


@SETTINGS
@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=12,
                unique_by=lambda t: t[0]), st.randoms())
def test_fit_line_independent_of_order(pairs, rnd):
    xs, ys = zip(*pairs)
    if np.ptp(xs) < 1e-6:
        return
    f = fit_line(xs, ys)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    g = fit_line(*zip(*shuffled))
    assert (f.slope, f.intercept, f.stderr) == (g.slope, g.intercept, g.stderr)
