import math

import numpy as np
import pytest

from membrane_lab.rng import RngStream, split_stream
from membrane_lab.stats import (
    cross_covariance, exponential_rate, fit_line, fit_loglog, summarize,
)


def test_streams_are_pure_functions_of_their_key():
    a = RngStream(5, ("x", 1)).generator().standard_normal(4)
    b = split_stream(5, "x", 1).generator().standard_normal(4)
    np.testing.assert_array_equal(a, b)
    c = RngStream(5, ("x", 2)).generator().standard_normal(4)
    d = RngStream(6, ("x", 1)).generator().standard_normal(4)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_child_composes_tags():
    s = RngStream(3).child("a").child(7)
    assert s == RngStream(3, ("a", 7))
    assert split_stream(s, "b") == RngStream(3, ("a", 7, "b"))
    assert s.to_json() == {"master_seed": 3, "tags": ["'a'", "7"]}


def test_summarize_known_sample():
    # [DERIVED] 1..5: mean 3, sd sqrt(2.5), se sqrt(2.5/5)
    s = summarize([1, 2, 3, 4, 5])
    assert s.mean == 3.0
    assert s.stderr == pytest.approx(math.sqrt(0.5))
    assert s.ci95[0] == pytest.approx(3 - 1.96 * math.sqrt(0.5))
    assert summarize([2.0]).stderr == 0.0
    with pytest.raises(ValueError):
        summarize([])


def test_fit_line_exact_and_order_free():
    x = [3.0, 1.0, 2.0, 4.0]
    y = [7.0, 3.0, 5.0, 9.0]
    f = fit_line(x, y)
    assert f.slope == pytest.approx(2.0) and f.intercept == pytest.approx(1.0)
    assert f.stderr == pytest.approx(0.0, abs=1e-12)
    g = fit_line(x[::-1], y[::-1])
    assert (g.slope, g.intercept, g.stderr) == (f.slope, f.intercept, f.stderr)
    with pytest.raises(ValueError):
        fit_line([1, 2], [1, 2])


def test_fit_loglog_power_law():
    xs = [2, 4, 8, 16]
    f = fit_loglog(xs, [5 * x**3 for x in xs])
    assert f.slope == pytest.approx(3.0)
    with pytest.raises(ValueError):
        fit_loglog(xs, [1, -1, 1, 1])
    with pytest.raises(ValueError):
        fit_loglog(xs, xs, mode="cubic")


def test_exponential_rate():
    r = exponential_rate([0.5, 1.5, 1.0])
    assert r.rate == pytest.approx(1.0) and r.n == 3
    with pytest.raises(ValueError):
        exponential_rate([-1.0])


def test_cross_covariance_matches_numpy():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((400, 3))
    b = a @ np.array([[1.0, 0.5], [0.0, 1.0], [0.3, 0.0]])
    cov, se = cross_covariance(a, b)
    ref = np.cov(np.hstack([a, b]).T)[:3, 3:]
    np.testing.assert_allclose(cov, ref, atol=1e-12)
    assert se.shape == cov.shape and np.all(se > 0)


def test_fit_constant_and_noisy_planted_slope():
    xs = [8, 12, 16, 24, 32]
    assert fit_loglog(xs, [2.0] * 5, mode="semilog").slope == pytest.approx(0.0, abs=1e-14)
    rng = np.random.default_rng(7)
    ys = [0.81 * math.log(x) + 1.0 + rng.normal(0, 0.01) for x in xs]
    f = fit_loglog(xs, ys, mode="semilog")
    assert abs(f.slope - 0.81) <= 2 * f.stderr


def test_summarize_small_cases():
    assert summarize([0, 2]).mean == 1.0
    assert summarize([4.0] * 7).stderr == 0.0


def test_replica_streams_uncorrelated():
    root = RngStream(1)
    x = np.array([root.child(i).generator().standard_normal() for i in range(4000)])
    y = np.array([root.child(i + 4000).generator().standard_normal() for i in range(4000)])
    assert abs(np.corrcoef(x, y)[0, 1]) <= 3 / math.sqrt(4000)


def test_ci_coverage_calibration():
    rng = np.random.default_rng(0)
    hits = 0
    for _ in range(400):
        s = summarize(rng.normal(1.0, 2.0, 200))
        hits += s.ci95[0] <= 1.0 <= s.ci95[1]
    assert 0.92 <= hits / 400 <= 0.98
