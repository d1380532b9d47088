"""Small statistics helpers: summaries, least-squares fits, exponential rates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Monte Carlo bands, in standard errors.  Every statistical check reads them
# from here so tuning touches one place.
THRESHOLDS = {
    "band_se": 3.0,
    "sampler_cov_se": 5.0,
    "ci_z": 1.96,
}


@dataclass(frozen=True)
class Summary:
    mean: float
    stderr: float
    ci95: tuple
    n: int

    def to_json(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr,
                "ci95": list(self.ci95), "n": self.n}


def summarize(values) -> Summary:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("cannot summarize an empty sample")
    mean = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    z = THRESHOLDS["ci_z"]
    return Summary(mean, se, (mean - z * se, mean + z * se), int(v.size))


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    stderr: float

    def to_json(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "stderr": self.stderr}


def fit_line(x, y) -> LineFit:
    """Ordinary least squares y = a + b x with the usual slope standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size != y.size:
        raise ValueError("x and y lengths differ")
    if x.size < 3:
        raise ValueError("need at least 3 points for a fit with a standard error")
    # sort so the floating-point result does not depend on input order
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("x values are all equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - intercept - slope * x
    dof = x.size - 2
    s2 = float(np.sum(resid**2) / dof)
    return LineFit(slope, intercept, math.sqrt(s2 / sxx))


def fit_loglog(xs, ys, mode: str = "loglog") -> LineFit:
    """Fit on (ln x, ln y) in ``loglog`` mode or (ln x, y) in ``semilog`` mode."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(xs <= 0):
        raise ValueError("log fit needs positive x values")
    if mode == "loglog":
        if np.any(ys <= 0):
            raise ValueError("log-log fit needs positive y values")
        return fit_line(np.log(xs), np.log(ys))
    if mode == "semilog":
        return fit_line(np.log(xs), ys)
    raise ValueError(f"unknown fit mode {mode!r}")


@dataclass(frozen=True)
class RateFit:
    rate: float
    stderr: float
    n: int


def exponential_rate(samples) -> RateFit:
    """MLE of the rate of an exponential law on [0, ∞): 1 / mean."""
    v = np.asarray(samples, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("no samples")
    if np.any(v < 0):
        raise ValueError("exponential samples must be nonnegative")
    rate = 1.0 / float(np.mean(v))
    return RateFit(rate, rate / math.sqrt(v.size), int(v.size))


def cross_covariance(a: np.ndarray, b: np.ndarray):
    """Empirical Cov(a_i, b_j) over rows, with per-entry standard errors.

    The standard error is the sample standard deviation of the centred
    products divided by √n, which needs no Gaussian assumption.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = a.shape[0]
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    cov = ac.T @ bc / (n - 1)
    second = (ac**2).T @ (bc**2) / n
    var = np.maximum(second - (ac.T @ bc / n) ** 2, 0.0)
    return cov, np.sqrt(var / n)
