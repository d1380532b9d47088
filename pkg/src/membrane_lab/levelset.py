"""Intermediate level sets of the membrane field and their point measures.

The level is a_N = 2λ√(2γ) ln N = (8λ/π) ln N and the normalisation is
K_N = N⁴/√(ln N) · exp(−a_N² / (2γ ln N)), which equals N^{4−4λ²}/√(ln N)
for the canonical level.  Logarithms are natural throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import stats
from .field import FactorizedGaussian, FieldSample, coarse_probes, prepare_sampler
from .green import GAMMA
from .lattice import BoxHierarchy, DomainError, LatticeDomain, PrecisionOperator, hierarchy, make_box
from .rng import RngStream

DEFAULT_MARGIN = 0.1


class InsufficientDataError(RuntimeError):
    """No level-set points were observed in any replica."""


@dataclass(frozen=True)
class ScalingParams:
    lam: float
    N: int
    a_N: float
    K_N: float
    k_N: int
    gamma: float = GAMMA
    epsilon_margin: float = DEFAULT_MARGIN

    def to_json(self) -> dict:
        return {"lambda": self.lam, "N": self.N, "a_N": self.a_N, "K_N": self.K_N,
                "k_N": self.k_N, "gamma": self.gamma, "epsilon_margin": self.epsilon_margin}


def canonical_level(lam: float, N: int) -> float:
    return 8.0 * lam / math.pi * math.log(N)


def scaling_params(lam: float, N: int, a_override: float | None = None,
                   margin: float = DEFAULT_MARGIN) -> ScalingParams:
    if not 0.0 < lam < 1.0:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    if N < 3:
        raise ValueError("N must be at least 3")
    logN = math.log(N)
    a = canonical_level(lam, N) if a_override is None else float(a_override)
    K = N**4 / math.sqrt(logN) * math.exp(-a * a / (2.0 * GAMMA * logN))
    k = max(0, math.floor(math.log(K) / 8.0))
    return ScalingParams(lam, N, a, K, k, GAMMA, margin)


def K_closed_form(lam: float, N: int) -> float:
    return N ** (4 - 4 * lam * lam) / math.sqrt(math.log(N))


# ---------------------------------------------------------------------------
# level sets


@dataclass
class LevelSet:
    b: float
    points: np.ndarray
    indices: np.ndarray


def _values(h) -> tuple[np.ndarray, LatticeDomain | None]:
    if isinstance(h, FieldSample):
        return h.values, h.domain
    return np.asarray(h, float), None


def extract_level_set(h: FieldSample, params: ScalingParams, b: float) -> LevelSet:
    """Γ_N(b) = {x : h(x) ≥ a_N + b}."""
    idx = np.nonzero(h.values >= params.a_N + b)[0]
    return LevelSet(b, h.domain.points[idx], idx)


# ---------------------------------------------------------------------------
# truncation


@dataclass
class TruncationRecord:
    x: tuple
    M: float
    passed: bool
    path: dict


def truncation_check(path: dict, n_x: int, k_N: int, a_N: float, M: float) -> bool:
    """Every k in [k_N, n(x)] has |S_k − a_N (n−k)/n| ≤ M (n−k)^{3/4}."""
    for k in range(k_N, n_x + 1):
        if k == n_x:
            # S_{n(x)} = 0 and the band has width 0: always satisfied
            continue
        target = a_N * (n_x - k) / n_x
        if abs(path[k] - target) > M * (n_x - k) ** 0.75:
            return False
    return True


def truncation_event(h: FieldSample, x, M: float, params: ScalingParams,
                     hier: BoxHierarchy | None = None, probes: list | None = None,
                     tol: float | None = None) -> TruncationRecord:
    hier = hier or hierarchy(h.domain, x)
    x = tuple(int(c) for c in x)
    if params.k_N > hier.n_x:
        return TruncationRecord(x, M, True, {})
    ks = list(range(params.k_N, hier.n_x + 1))
    probes = probes or coarse_probes(h.domain, x, ks, tol=tol, hier=hier)
    path = {k: float(p(h.values)) for k, p in zip(ks, probes)}
    path[hier.n_x] = 0.0
    return TruncationRecord(x, M, truncation_check(path, hier.n_x, params.k_N, params.a_N, M), path)


# ---------------------------------------------------------------------------
# point measures


@dataclass
class PointMeasure:
    positions: np.ndarray
    heights: np.ndarray
    weight: float
    truncated: float | None = None
    indices: np.ndarray = field(default=None, repr=False)

    @property
    def n_atoms(self) -> int:
        return len(self.heights)

    def total_mass(self) -> float:
        return self.n_atoms * self.weight


@dataclass(frozen=True)
class ProductTest:
    """1_{region}(position) · 1_{[h_lo, h_hi)}(height); region an open box."""

    lo: tuple
    hi: tuple
    h_lo: float = 0.0
    h_hi: float = math.inf

    def __call__(self, pos: np.ndarray, heights: np.ndarray) -> np.ndarray:
        inside = np.all((pos > np.asarray(self.lo)) & (pos < np.asarray(self.hi)), axis=1)
        window = (heights >= self.h_lo) & (heights < self.h_hi)
        return (inside & window).astype(float)


def build_eta(h: FieldSample, params: ScalingParams, M: float | None = None,
              min_height: float = -math.inf, tol: float | None = None) -> PointMeasure:
    """Atoms (x/N, h(x) − a_N) with weight 1/K_N.

    With ``M`` only points whose coarse-field path satisfies T_{N,M} keep
    their atom.  ``min_height`` restricts to heights at or above a floor.
    """
    heights = h.values - params.a_N
    keep = np.nonzero(heights >= min_height)[0]
    if M is not None:
        ok = []
        for i in keep:
            z = tuple(int(c) for c in h.domain.points[i])
            ok.append(truncation_event(h, z, M, params, tol=tol).passed)
        keep = keep[np.asarray(ok, bool)] if len(keep) else keep
    pos = h.domain.points[keep] / params.N
    return PointMeasure(pos, heights[keep], 1.0 / params.K_N, M, keep)


def integrate(measure: PointMeasure, f) -> float:
    """Σ_atoms weight · f(position, height)."""
    if measure.n_atoms == 0:
        return 0.0
    vals = np.asarray(f(measure.positions, measure.heights), float)
    return float(measure.weight * vals.sum())


# ---------------------------------------------------------------------------
# moment prediction


def region_mask(domain: LatticeDomain, N: int, lo, hi) -> np.ndarray:
    """Points z of V with z/N in the open box (lo, hi)."""
    u = domain.points / N
    return np.all((u > np.asarray(lo)) & (u < np.asarray(hi)), axis=1)


def predicted_moment(region, b: float, params: ScalingParams, sD: np.ndarray,
                     domain: LatticeDomain) -> float:
    """e^{−πλb}/(4λ√π) · (∫_A e^{(4λ²/γ) s_D(x)} dx) · K_N.

    The integral is the lattice-node sum N^{-4} Σ_{z/N ∈ A} over the same
    points that a level-set count in A sees.  ``sD`` holds lattice s_D
    estimates at every point of ``domain``; ``region`` is an open box
    (lo, hi) that must stay inside the unit cube.
    """
    lo, hi = (np.asarray(v, float) for v in region)
    if np.any(hi <= lo):
        return 0.0
    if np.any(lo <= 0.0) or np.any(hi >= 1.0):
        raise DomainError("region touches the boundary of the domain")
    lam = params.lam
    N = params.N
    inside = region_mask(domain, N, lo, hi)
    integral = float(np.sum(np.exp(4 * lam**2 / params.gamma * sD[inside]))) / N**domain.dim
    return math.exp(-math.pi * lam * b) / (4 * lam * math.sqrt(math.pi)) * integral * params.K_N


def exact_count_mean(params: ScalingParams, G_diag: np.ndarray, mask=None, b: float = 0.0) -> float:
    """Σ_x P(h_x ≥ a_N + b) from the Green diagonal (Gaussian marginals)."""
    from scipy.special import ndtr

    g = G_diag if mask is None else G_diag[mask]
    return float(np.sum(ndtr(-(params.a_N + b) / np.sqrt(g))))


# ---------------------------------------------------------------------------
# Monte Carlo tallies (streaming: fields are never all held at once)


def iter_fields(sampler: FactorizedGaussian, stream: RngStream, replicas: int,
                batch: int = 32, start: int = 0):
    """Yield (replica ids, field rows) in fixed batches keyed by replica id."""
    for s in range(start, start + replicas, batch):
        ids = list(range(s, min(s + batch, start + replicas)))
        yield ids, sampler.sample_values([stream.child("replica", i) for i in ids])


class CountTally:
    """Per-replica |Γ_N(b) ∩ A_N| for several shifts b."""

    def __init__(self, params: ScalingParams, b_list=(0.0,), mask: np.ndarray | None = None):
        self.params = params
        self.b_list = [float(b) for b in b_list]
        self.mask = mask
        self.counts: list[list[int]] = []
        self.over_sum = 0.0
        self.over_n = 0

    def update(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(rows)
        if self.mask is not None:
            rows = rows[:, self.mask]
        a = self.params.a_N
        for r in rows:
            self.counts.append([int(np.count_nonzero(r >= a + b)) for b in self.b_list])
            over = r[r >= a] - a
            self.over_sum += float(over.sum())
            self.over_n += int(over.size)

    def count_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float).reshape(-1, len(self.b_list))

    def mean(self, b: float = 0.0) -> stats.Summary:
        return stats.summarize(self.count_array()[:, self.b_list.index(float(b))])


@dataclass
class CensusReport:
    lam: float
    sizes: list
    means: list
    stderrs: list
    slope: float
    slope_stderr: float
    predicted_slope: float
    rows: list

    def to_json(self) -> dict:
        return {"lambda": self.lam, "sizes": self.sizes, "mean_count": self.means,
                "stderr": self.stderrs, "slope": self.slope, "slope_stderr": self.slope_stderr,
                "predicted_slope": self.predicted_slope}


def census_experiment(lambdas, sizes, replicas: int, stream: RngStream, dim: int = 4,
                      margin: float | None = None, tol: float | None = None,
                      method: str = "auto", batch: int = 32) -> list[CensusReport]:
    """Fit ln E|Γ_N(0)| against ln N for each λ; one shared field set per N.

    ``margin`` restricts counts to D_N^ε = {x : εN ≤ x_i ≤ (1−ε)N}.
    """
    sizes = sorted(int(n) for n in sizes)
    if len(sizes) < 3:
        raise ValueError("census needs at least 3 sizes")
    lambdas = [float(l) for l in lambdas]
    tallies = {}
    for N in sizes:
        dom = make_box(dim, N)
        mask = None
        if margin:
            mask = np.all((dom.points >= margin * N) & (dom.points <= (1 - margin) * N), axis=1)
        sampler = prepare_sampler(PrecisionOperator(dom), method=method, tol=tol)
        ts = [CountTally(scaling_params(l, N), (0.0,), mask) for l in lambdas]
        for _, rows in iter_fields(sampler, stream.child("census", N), replicas, batch):
            for t in ts:
                t.update(rows)
        tallies[N] = ts
    reports = []
    for j, lam in enumerate(lambdas):
        means, ses, rows = [], [], []
        for N in sizes:
            t = tallies[N][j]
            s = t.mean(0.0)
            means.append(s.mean)
            ses.append(s.stderr)
            for r, c in enumerate(t.count_array()[:, 0]):
                rows.append({"lambda": lam, "N": N, "replica": r, "count": int(c)})
        if min(means) <= 0:
            raise InsufficientDataError(f"empty level sets at lambda={lam}")
        fit = stats.fit_loglog(sizes, means)
        reports.append(CensusReport(lam, sizes, means, ses, fit.slope, fit.stderr,
                                    4 * (1 - lam * lam), rows))
    return reports


@dataclass
class TailReport:
    lam: float
    overshoot_rate: float
    rate_stderr: float
    predicted_rate: float
    n_overshoots: int
    ratio_table: list

    def to_json(self) -> dict:
        return {"lambda": self.lam, "overshoot_rate": self.overshoot_rate,
                "rate_stderr": self.rate_stderr, "predicted_rate": self.predicted_rate,
                "n_overshoots": self.n_overshoots, "ratio_table": self.ratio_table}


def tail_report(tally: CountTally) -> TailReport:
    lam = tally.params.lam
    if tally.over_n == 0:
        raise InsufficientDataError("no level-set points in any replica")
    rate = tally.over_n / tally.over_sum
    counts = tally.count_array()
    n = len(counts)
    base = counts[:, tally.b_list.index(0.0)] if 0.0 in tally.b_list else None
    table = []
    for j, b in enumerate(tally.b_list):
        c = counts[:, j]
        if base is None or base.mean() == 0:
            ratio, se = math.nan, math.nan
        else:
            ratio = float(c.mean() / base.mean())
            # delta method for a ratio of correlated means
            cov = np.cov(np.stack([c, base]), ddof=1) / n
            gr = np.array([1.0 / base.mean(), -c.mean() / base.mean() ** 2])
            se = float(math.sqrt(max(gr @ cov @ gr, 0.0)))
        table.append({"b": b, "ratio": ratio, "stderr": se,
                      "predicted": math.exp(-math.pi * lam * b)})
    return TailReport(lam, rate, rate / math.sqrt(tally.over_n), math.pi * lam,
                      tally.over_n, table)


def tail_checks(fields, params: ScalingParams, b_list=(0.0, 0.5), min_replicas: int = 100,
                mask: np.ndarray | None = None) -> TailReport:
    """Overshoot rate of {h − a_N : h ≥ a_N} and ratios E|Γ(b)|/E|Γ(0)|.

    ``fields`` is an iterable of field rows (or 2-d batches of rows).
    """
    bl = sorted({0.0, *[float(b) for b in b_list]})
    tally = CountTally(params, bl, mask)
    for f in fields:
        tally.update(f.values if isinstance(f, FieldSample) else f)
    if len(tally.counts) < min_replicas:
        raise ValueError(f"tail checks need >= {min_replicas} replicas, got {len(tally.counts)}")
    return tail_report(tally)
