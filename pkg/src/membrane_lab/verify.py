"""Verification suites.

``exact`` checks are finite identities that hold to machine precision.
``statistical`` checks are Monte Carlo or finite-size comparisons with pinned
seeds and fixed bands.  Every check reports the measured value next to its
threshold so failures are inspectable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.linalg as la

from . import stats
from .field import (
    BasisSampler, BiharmonicExtension, coarse_probes, conditional_coefficients,
    gibbs_markov_covariance_gap, prepare_sampler, sample_many,
)
from .gmc import (
    DyadicCube, SQRT_PI_4, SpectralBasis, dyadic_tree, full_basis_defect, spectral_masses,
    ym_masses, zlambda_mean, compare_constructions,
)
from .green import (
    GAMMA, center_point, fit_gamma, green_columns, green_diagonal, lattice_sD,
    symmetry_defect,
)
from .lattice import (
    PrecisionOperator, bilaplacian_stencil, make_box, make_lattice_box,
)
from .levelset import (
    CountTally, K_closed_form, iter_fields, predicted_moment, region_mask,
    scaling_params, tail_report,
)
from .rng import RngStream


@dataclass
class Check:
    name: str
    passed: bool
    value: object
    threshold: object
    detail: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"check": self.name, "passed": bool(self.passed), "value": self.value,
                "threshold": self.threshold, "detail": self.detail}


# ---------------------------------------------------------------------------
# exact tier


def check_stencil(d: int = 4) -> Check:
    st = bilaplacian_stencil(d)
    e = np.eye(d, dtype=int)
    got = (st[(0,) * d], st[tuple(e[0])], st[tuple(e[0] + e[1])], st[tuple(2 * e[0])])
    want = (Fraction(9, 8), Fraction(-1, 4), Fraction(1, 32), Fraction(1, 64))
    err = max(abs(float(g - w)) for g, w in zip(got, want))
    total = sum(st.entries.values())
    return Check("stencil", err <= 1e-12 and total == 0,
                 [float(g) for g in got], 1e-12,
                 {"expected": [float(w) for w in want], "sum": float(total),
                  "max_error": err})


def check_single_point_green() -> Check:
    dom = make_lattice_box((1,) * 4, (1,) * 4)
    g = green_diagonal(dom, tol=1e-12)[0]
    return Check("single_point_green", abs(g - 8 / 9) <= 1e-10, float(g), 1e-10,
                 {"expected": 8 / 9})


def check_green_residual(seed: int = 7, N: int = 10, n_cols: int = 5) -> Check:
    dom = make_box(4, N)
    rng = RngStream(seed, ("green-residual",)).generator()
    picks = rng.choice(dom.size, size=n_cols, replace=False)
    cols = green_columns(PrecisionOperator(dom), [tuple(p) for p in dom.points[picks]], tol=1e-8)
    res = max(c.residual for c in cols)
    sym = symmetry_defect(cols)
    return Check("green_residual", res <= 1e-8 and sym <= 1e-7, {"residual": res, "symmetry": sym},
                 {"residual": 1e-8, "symmetry": 1e-7}, {"sources": [list(c.source) for c in cols]})


def check_gibbs_markov(N: int = 10, inner: int = 6) -> Check:
    V = make_box(4, N)
    off = (N - inner) // 2
    U = make_lattice_box((1 + off,) * 4, (inner - 1 + off,) * 4)
    gap = gibbs_markov_covariance_gap(V, U)
    return Check("gibbs_markov_covariance", gap <= 1e-8, gap, 1e-8,
                 {"V": V.descriptor, "U_size": U.size})


def check_conditional_mean(seed: int = 7) -> Check:
    coef = conditional_coefficients(4)
    e = np.eye(4, dtype=int)
    got = (coef[tuple(e[0])], coef[tuple(e[0] + e[1])], coef[tuple(2 * e[0])])
    want = (Fraction(2, 9), Fraction(-1, 36), Fraction(-1, 72))
    err = max(abs(float(g - w)) for g, w in zip(got, want))
    csum = float(sum(coef.values()))
    # biharmonicity of the extension of a sampled field
    V = make_box(4, 10)
    U = make_lattice_box((3,) * 4, (7,) * 4)
    ext = BiharmonicExtension(V, U, tol=1e-12)
    h = prepare_sampler(ext.op_V).sample_values([RngStream(seed, ("cond-mean",))])[0]
    phi = ext.from_field(h)
    defect = ext.bilaplacian_defect(h[ext.o_idx], phi)
    ok = err <= 1e-12 and abs(csum - 1) <= 1e-12 and defect <= 1e-8
    return Check("conditional_mean", ok,
                 {"coefficients": [float(g) for g in got], "sum": csum, "bilaplacian": defect},
                 {"coefficients": 1e-12, "sum": 1e-12, "bilaplacian": 1e-8})


def check_monotonicity() -> Check:
    pairs = [(6, (2,) * 4, (4,) * 4), (8, (2,) * 4, (6,) * 4), (10, (3,) * 4, (7,) * 4)]
    worst = math.inf
    for N, lo, hi in pairs:
        V = make_box(4, N)
        U = make_lattice_box(lo, hi)
        gv = green_diagonal(V, U.points, tol=1e-10)
        gu = green_diagonal(U, tol=1e-10)
        worst = min(worst, float(np.min(gv - gu)))
    return Check("monotonicity", worst >= -1e-8, worst, -1e-8, {"pairs": len(pairs)})


def check_basis_reconstruction(N: int = 6) -> Check:
    dom = make_box(4, N)
    op = PrecisionOperator(dom)
    bs = BasisSampler(op)
    G = la.cho_solve(la.cho_factor(op.dense()), np.eye(dom.size))
    err = float(np.abs(bs.covariance() - G).max())
    gram = float(np.abs(bs.gram() - np.eye(dom.size)).max())
    return Check("basis_reconstruction", err <= 1e-6, err, 1e-6,
                 {"points": dom.size, "gram_error": gram})


def check_scaling_identities() -> Check:
    worst_K = worst_a = 0.0
    for lam in (0.1, 0.3, 0.5, 0.7, 0.9):
        for N in (8, 16, 32, 100, 1000):
            p = scaling_params(lam, N)
            worst_K = max(worst_K, abs(p.K_N - K_closed_form(lam, N)) / p.K_N)
            worst_a = max(worst_a, abs(p.a_N * math.pi / (8 * math.log(N)) - lam) / lam)
    return Check("scaling_identities", worst_K <= 1e-9 and worst_a <= 1e-9,
                 {"K_rel": worst_K, "lambda_rel": worst_a}, 1e-9)


def exact_checks(seed: int = 7, quick: bool = False) -> list[Check]:
    checks = [check_stencil(), check_single_point_green(), check_green_residual(seed),
              check_gibbs_markov(), check_conditional_mean(seed), check_monotonicity(),
              check_basis_reconstruction(), check_scaling_identities()]
    return checks


def gibbs_markov_suite(seed: int = 7) -> list[Check]:
    """Gibbs-Markov covariance, conditional-mean stencil and basis reconstruction."""
    return [check_gibbs_markov(), check_conditional_mean(seed), check_basis_reconstruction()]


# ---------------------------------------------------------------------------
# statistical tier


def check_gamma_fit(sizes=(8, 12, 16, 24, 32)) -> Check:
    fit = fit_gamma(sizes, tol=1e-8)
    return Check("gamma_fit", 0.71 <= fit.slope <= 0.91, fit.slope, [0.71, 0.91],
                 {"stderr": fit.stderr, "G_center": list(fit.values), "gamma": GAMMA})


def covariance_z_scores(X: np.ndarray, G: np.ndarray) -> np.ndarray:
    """|Ĉ − G| / SE for the zero-mean estimator Ĉ = XᵀX/n.

    SE is the null standard error √((G_ii G_jj + G_ij²)/n) of a Gaussian
    product moment.
    """
    n = X.shape[0]
    C = X.T @ X / n
    d = np.diag(G)
    return np.abs(C - G) / np.sqrt((np.outer(d, d) + G**2) / n)


def check_sampler_covariance(seed: int = 11, replicas: int = 2000, se_limit: float = 5.0) -> Check:
    dom = make_box(4, 8)
    op = PrecisionOperator(dom)
    G = la.cho_solve(la.cho_factor(op.dense()), np.eye(dom.size))
    root = RngStream(seed, ("sampler-cov",))
    X = sample_many(prepare_sampler(op), [root.child(i) for i in range(replicas)], batch=250)
    zs = covariance_z_scores(X, G)
    z = float(zs.max())
    beyond3 = float(np.mean(zs > 3))
    # basis sampler against the factorised sampler on a 5^4-point box
    small = make_box(4, 6)
    sop = PrecisionOperator(small)
    Gs = la.cho_solve(la.cho_factor(sop.dense()), np.eye(small.size))
    bs = BasisSampler(sop)
    Y1 = bs.sample_values([root.child("basis", i) for i in range(replicas)])
    Y2 = sample_many(prepare_sampler(sop), [root.child("factor", i) for i in range(replicas)],
                     batch=250)
    d = np.diag(Gs)
    se2 = np.sqrt(2 * (np.outer(d, d) + Gs**2) / replicas)
    z2 = float(np.max(np.abs(Y1.T @ Y1 - Y2.T @ Y2) / replicas / se2))
    return Check("sampler_covariance", z <= se_limit and z2 <= se_limit,
                 {"max_z_factor_vs_green": z, "max_z_basis_vs_factor": z2}, se_limit,
                 {"replicas": replicas, "entries": int(G.size),
                  "fraction_beyond_3se": beyond3, "nominal_fraction_beyond_3se": 0.0027})


def coarse_increment_stats(N: int = 16, replicas: int = 10_000, seed: int = 13,
                           k: int = 1, m: int = 2, probes=None, batch: int = 32) -> dict:
    """Monte Carlo Var[S_k − S_m] at probe points near the centre.

    The levels are Λ_{⌊e^k⌋}(x) ∩ D_N for every k ≥ 1 (radius levels).
    """
    dom = make_box(4, N)
    c = N // 2
    probes = probes or [(c, c, c, c), (c - 1, c, c, c), (c, c - 1, c, c),
                        (c, c, c - 1, c), (c, c, c, c - 1)]
    funcs = {x: coarse_probes(dom, x, [k, m], levels="radius") for x in probes}
    sampler = prepare_sampler(PrecisionOperator(dom))
    diffs = {x: [] for x in probes}
    for _, rows in iter_fields(sampler, RngStream(seed, ("coarse",)), replicas, batch):
        for x, (pk, pm) in funcs.items():
            diffs[x].append(pk(rows) - pm(rows))
    out = {}
    for x in probes:
        v = np.concatenate(diffs[x])
        var = float(np.var(v, ddof=1))
        # standard error of a Gaussian sample variance
        out[x] = {"variance": var, "stderr": var * math.sqrt(2.0 / (len(v) - 1)),
                  "target": (m - k) * GAMMA}
    return out


def check_coarse_increments(replicas: int = 10_000, seed: int = 13) -> Check:
    res = coarse_increment_stats(replicas=replicas, seed=seed)
    worst = 0.0
    ok = True
    for x, r in res.items():
        dev = abs(r["variance"] - r["target"])
        band = 3 * r["stderr"] + 0.3
        ok &= dev <= band
        worst = max(worst, dev - band)
    return Check("coarse_increments", bool(ok), {str(k): v for k, v in res.items()},
                 "3 SE + 0.3", {"worst_excess": worst})


@lru_cache(maxsize=4)
def _level_set_pool(N: int, replicas: int, seed: int):
    """One pass over N-box fields feeding every level-set tally used below."""
    dom = make_box(4, N)
    sampler = prepare_sampler(PrecisionOperator(dom))
    half = region_mask(dom, N, (0.25,) * 4, (0.75,) * 4)
    tallies = {
        "census_0.5": CountTally(scaling_params(0.5, N), (0.0,)),
        "half_0.5": CountTally(scaling_params(0.5, N), (0.0,), half),
        "tail_0.3": CountTally(scaling_params(0.3, N), (0.0, 0.5)),
        "tail_0.5": CountTally(scaling_params(0.5, N), (0.0, 0.5)),
    }
    for _, rows in iter_fields(sampler, RngStream(seed, ("levelset", N)), replicas):
        for t in tallies.values():
            t.update(rows)
    return tallies


def check_level_set_exponent(sizes=(8, 12, 16), replicas: int = 500, seed: int = 17) -> Check:
    means = [_level_set_pool(N, replicas, seed)["census_0.5"].mean(0.0).mean for N in sizes]
    fit = stats.fit_loglog(sizes, means)
    return Check("level_set_exponent", abs(fit.slope - 3.0) <= 0.7, fit.slope, "3.0 ± 0.7",
                 {"mean_counts": means, "stderr": fit.stderr, "sizes": list(sizes)})


def check_first_moment(N: int = 16, replicas: int = 500, seed: int = 17) -> Check:
    p = scaling_params(0.5, N)
    dom = make_box(4, N)
    sd = lattice_sD(dom, N)
    pred = predicted_moment(((0.25,) * 4, (0.75,) * 4), 0.0, p, sd, dom)
    mc = _level_set_pool(N, replicas, seed)["half_0.5"].mean(0.0)
    rel = abs(mc.mean - pred) / pred
    return Check("first_moment", rel <= 0.25, rel, 0.25,
                 {"monte_carlo": mc.mean, "stderr": mc.stderr, "predicted": pred})


def check_tail(N: int = 16, replicas: int = 500, seed: int = 17, lam: float = 0.3) -> Check:
    rep = tail_report(_level_set_pool(N, replicas, seed)[f"tail_{lam}"])
    rate_rel = abs(rep.overshoot_rate - rep.predicted_rate) / rep.predicted_rate
    row = next(r for r in rep.ratio_table if r["b"] == 0.5)
    ratio_rel = abs(row["ratio"] - row["predicted"]) / row["predicted"]
    return Check("tail_factorization", rate_rel <= 0.20 and ratio_rel <= 0.15,
                 {"rate_rel_error": rate_rel, "ratio_rel_error": ratio_rel},
                 {"rate": 0.20, "ratio": 0.15}, rep.to_json())


def check_ym_martingale(N: int = 16, replicas: int = 500, seed: int = 19, lam: float = 0.3) -> Check:
    tree = dyadic_tree(0, 2)
    root = RngStream(seed, ("ym",))
    M = ym_masses(tree, N, lam, [root.child(i) for i in range(replicas)], depths=[1, 2])
    s1, s2 = stats.summarize(M[:, 0]), stats.summarize(M[:, 1])
    dom = make_box(4, N)
    z = zlambda_mean(DyadicCube(0, (0,) * 4), lam, lattice_sD(dom, N), dom, N)
    ratio = s1.mean / s2.mean
    ok = abs(ratio - 1) <= 0.10
    zs = {}
    for name, s in (("m=1", s1), ("m=2", s2)):
        zs[name] = (s.mean - z) / s.stderr
        ok &= abs(s.mean - z) <= 3 * s.stderr
    return Check("ym_martingale", bool(ok), {"ratio": ratio, "z_scores": zs},
                 {"ratio": 0.10, "z": 3.0},
                 {"mean_m1": s1.mean, "mean_m2": s2.mean, "se_m1": s1.stderr,
                  "se_m2": s2.stderr, "zlambda_mean": z})


def check_spectral_normalization(N: int = 10, replicas: int = 1000, seed: int = 23,
                                 beta: float = math.pi * 0.3) -> Check:
    dom = make_box(4, N)
    basis = SpectralBasis(PrecisionOperator(dom))
    root = RngStream(seed, ("spectral",))
    out = {}
    ok = True
    for n in (0, 10, dom.size):
        m = spectral_masses(dom, beta, n, [root.child(n, i) for i in range(replicas)], N,
                            basis=basis)
        s = stats.summarize(m)
        dev = abs(s.mean - 1.0)
        good = dev <= max(3 * s.stderr, 1e-12)
        ok &= good
        out[str(n)] = {"mean": s.mean, "stderr": s.stderr}
    defect = full_basis_defect(basis, beta, root.child("identity"))
    ok &= defect <= 1e-10
    return Check("spectral_normalization", bool(ok), {"means": out, "full_basis_defect": defect},
                 {"z": 3.0, "identity": 1e-10})


def check_construction_comparison(N: int = 12, replicas: int = 500, seed: int = 29,
                                  lam: float = 0.3) -> Check:
    tree = dyadic_tree(0, 1)
    dom = make_box(4, N)
    weight = SQRT_PI_4 * np.exp(4 * lam**2 / GAMMA * lattice_sD(dom, N))
    root = RngStream(seed, ("compare",))
    ym = ym_masses(tree, N, lam, [root.child("ym", i) for i in range(replicas)])[:, 0]
    sp = spectral_masses(dom, math.pi * lam, dom.size,
                         [root.child("spectral", i) for i in range(replicas)], N, weight=weight)
    c = compare_constructions(ym, sp, lam)
    return Check("construction_comparison", abs(c.mean_ratio - 1) <= 0.15, c.mean_ratio, 0.15,
                 c.to_json())


def check_scaling_identity(resolutions=(12, 24)) -> Check:
    out = {}
    ok = True
    for N in resolutions:
        g1 = green_diagonal(make_box(4, N), [center_point(N)], tol=1e-8)[0]
        g2 = green_diagonal(make_box(4, 2 * N), [center_point(2 * N)], tol=1e-8)[0]
        dev = abs(g2 - g1 - GAMMA * math.log(2))
        ok &= dev < 0.1
        out[str(N)] = {"difference": float(g2 - g1), "deviation": float(dev)}
    return Check("scaling_identity", bool(ok), out, 0.1, {"gamma_log2": GAMMA * math.log(2)})


def statistical_checks(seed: int = 7) -> list[Check]:
    return [check_gamma_fit(), check_sampler_covariance(), check_coarse_increments(),
            check_level_set_exponent(), check_first_moment(), check_tail(),
            check_ym_martingale(), check_spectral_normalization(),
            check_construction_comparison(), check_scaling_identity()]
