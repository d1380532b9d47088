"""Green function of the membrane model and the quantities derived from it.

G^V solves Δ²G(·, y) = δ_y in V with zero values outside V.  On top of
column solves this module estimates the log-growth constant, the finite
correction s_D(x) = lim G^{D_N}(xN, xN) − γ log N, coarse covariances between
nested domains, and a monitor for the uniform log bound.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import stats
from .lattice import (
    DomainError, LatticeDomain, PrecisionOperator, continuum_cubes,
    make_box, make_dyadic_union, _as_cube,
)
from .solvers import LinearSolver, SolverError

GAMMA = 8.0 / math.pi**2
DEFAULT_THETA = 1.0


@dataclass
class GreenColumn:
    source: tuple
    values: np.ndarray
    residual: float
    domain: LatticeDomain = field(repr=False)

    def at(self, z) -> float:
        return float(self.values[self.domain.index_of(z)])


def _solver(op: PrecisionOperator, tol, method, max_dense=None) -> LinearSolver:
    return LinearSolver(op, method=method, tol=tol, max_dense=max_dense)


def green_columns(op: PrecisionOperator, sources, tol: float | None = None,
                  method: str = "auto", solver: LinearSolver | None = None) -> list[GreenColumn]:
    dom = op.domain
    sources = [tuple(int(c) for c in s) for s in sources]
    idx = dom.indices_of(sources) if sources else np.zeros(0, int)
    solver = solver or _solver(op, tol, method)
    rhs = np.zeros((len(sources), dom.size))
    rhs[np.arange(len(sources)), idx] = 1.0
    X, res = solver.solve(rhs, tol=tol)
    cols = [GreenColumn(s, X[i], float(res[i]), dom) for i, s in enumerate(sources)]
    for c, i in zip(cols, idx):
        if not c.values[i] > 0:
            raise SolverError("nonpositive Green diagonal", c.residual, 0)
    return cols


def solve_green_column(op: PrecisionOperator, y, tol: float | None = None,
                       method: str = "auto") -> GreenColumn:
    """Column G(·, y); the residual ‖A g − e_y‖∞ is stored on the result."""
    if tol is not None and tol <= 0:
        raise ValueError("tolerance must be positive")
    return green_columns(op, [y], tol=tol, method=method)[0]


def symmetry_defect(columns: list[GreenColumn]) -> float:
    """max |G(x, y) − G(y, x)| over all pairs of solved sources."""
    worst = 0.0
    for a, b in itertools.combinations(columns, 2):
        worst = max(worst, abs(a.at(b.source) - b.at(a.source)))
    return worst


# ---------------------------------------------------------------------------
# diagonals with symmetry reduction


def _symmetry_group(domain: LatticeDomain):
    """Hyperoctahedral symmetries of the bounding box that preserve V."""
    d = domain.dim
    ext = domain.hi - domain.lo
    core = domain.mask[domain._inner]
    group = []
    for perm in itertools.permutations(range(d)):
        if any(ext[perm[i]] != ext[i] for i in range(d)):
            continue
        moved = np.transpose(core, perm)
        for flips in itertools.product((False, True), repeat=d):
            axes = tuple(i for i, f in enumerate(flips) if f)
            img = np.flip(moved, axes) if axes else moved
            if domain.single_box is not None or np.array_equal(img, core):
                group.append((perm, flips))
    return group


def _transform(rel: np.ndarray, g, ext: np.ndarray) -> np.ndarray:
    perm, flips = g
    out = rel[:, list(perm)].copy()
    for i, f in enumerate(flips):
        if f:
            out[:, i] = ext[i] - out[:, i]
    return out


def orbit_representatives(domain: LatticeDomain, points: np.ndarray):
    """Map points to canonical orbit representatives under the symmetries of V.

    Returns (representatives, inverse) with points[i] ~ representatives[inverse[i]].
    """
    pts = np.asarray(points, dtype=np.int64).reshape(-1, domain.dim)
    ext = domain.hi - domain.lo
    base = int(ext.max()) + 1
    weights = base ** np.arange(domain.dim - 1, -1, -1, dtype=np.int64)
    rel = pts - domain.lo
    best = None
    best_key = None
    for g in _symmetry_group(domain):
        img = _transform(rel, g, ext)
        key = img @ weights
        if best is None:
            best, best_key = img, key
        else:
            better = key < best_key
            best[better] = img[better]
            best_key = np.where(better, key, best_key)
    keys, first, inverse = np.unique(best_key, return_index=True, return_inverse=True)
    return best[first] + domain.lo, inverse.ravel()


_DIAG_CACHE: dict = {}


def green_diagonal(domain: LatticeDomain, points=None, tol: float | None = None,
                   method: str = "auto", use_symmetry: bool = True,
                   batch: int = 32) -> np.ndarray:
    """G(x, x) for each requested point (all of V when ``points`` is None)."""
    pts = domain.points if points is None else np.asarray(points, np.int64).reshape(-1, domain.dim)
    domain.indices_of(pts)
    if use_symmetry:
        reps, inv = orbit_representatives(domain, pts)
    else:
        reps, inv = pts, np.arange(len(pts))
    # point-set descriptors do not pin the sites, so key on the sites too
    digest = hashlib.blake2b(np.ascontiguousarray(domain.points).tobytes(), digest_size=16)
    key = (json.dumps(domain.descriptor, sort_keys=True), digest.hexdigest(), tol, method)
    cache = _DIAG_CACHE.setdefault(key, {})
    missing = [tuple(r) for r in reps.tolist() if tuple(r) not in cache]
    if missing:
        op = PrecisionOperator(domain)
        solver = _solver(op, tol, method)
        if solver.method == "dense" and len(missing) > domain.size // 4:
            Ginv = solver.inverse_dense()
            for z in missing:
                i = domain.index_of(z)
                cache[z] = float(Ginv[i, i])
        else:
            for s in range(0, len(missing), batch):
                chunk = missing[s:s + batch]
                for c in green_columns(op, chunk, tol=tol, solver=solver):
                    cache[c.source] = c.at(c.source)
    rep_vals = np.array([cache[tuple(r)] for r in reps.tolist()])
    return rep_vals[inv]


def center_point(N: int, d: int = 4) -> tuple:
    return (N // 2,) * d


# ---------------------------------------------------------------------------
# γ fit and s_D


@dataclass(frozen=True)
class GammaFit:
    slope: float
    stderr: float
    sizes: tuple
    values: tuple

    def to_json(self) -> dict:
        return {"gamma_hat": self.slope, "stderr": self.stderr,
                "sizes": list(self.sizes), "G_center": list(self.values)}


def fit_gamma(sizes, tol: float | None = None, values=None, dim: int = 4,
              method: str = "auto") -> GammaFit:
    """Slope of G^{D_N}(centre, centre) against ln N.

    ``values`` skips the solves and fits the given diagonal values instead.
    """
    sizes = [int(n) for n in sizes]
    if len(sizes) < 3:
        raise ValueError("fit_gamma needs at least 3 sizes")
    if values is None:
        values = []
        for N in sizes:
            dom = make_box(dim, N)
            values.append(float(green_diagonal(dom, [center_point(N, dim)], tol=tol,
                                               method=method)[0]))
    fit = stats.fit_loglog(sizes, values, mode="semilog")
    order = np.argsort(sizes, kind="stable")
    return GammaFit(fit.slope, fit.stderr, tuple(np.asarray(sizes)[order].tolist()),
                    tuple(np.asarray(values, float)[order].tolist()))


def _cubes(D) -> list:
    if isinstance(D, dict):
        return continuum_cubes(D)
    return [_as_cube(c) for c in D]


def continuum_domain(D, N: int) -> LatticeDomain:
    """D_N for a continuum domain given as a descriptor or list of dyadic cubes."""
    if isinstance(D, dict) and D.get("kind") == "box":
        return make_box(int(D["dim"]), N)
    return make_dyadic_union(_cubes(D), N)


def clearance_map(domain: LatticeDomain) -> np.ndarray:
    """l∞ lattice distance from each point of V to the nearest point outside V."""
    dist = ndimage.distance_transform_cdt(domain.mask, metric="chessboard")
    return dist[tuple((domain.points - domain.origin).T)].astype(np.int64)


def lattice_point(domain: LatticeDomain, N: int, x) -> tuple:
    """[xN]: componentwise floor of N x, moved to the nearest point of V if needed."""
    x = np.asarray(x, dtype=float)
    z = np.floor(N * x).astype(np.int64)
    if domain.contains(z):
        return tuple(int(c) for c in z)
    pts = domain.points
    dev = np.abs(pts - N * x)
    score = dev.max(axis=1) * (domain.dim + 1) + dev.sum(axis=1)
    return tuple(int(c) for c in pts[int(np.argmin(score))])


def estimate_sD(D, N: int, x, tol: float | None = None, theta: float = DEFAULT_THETA,
                method: str = "auto") -> float:
    """G^{D_N}([xN], [xN]) − γ ln N.

    Requires the l∞ distance from x to the complement of D to be at least
    (ln N)^θ / N.
    """
    dom = continuum_domain(D, N)
    z = lattice_point(dom, N, x)
    dist = clearance_map(dom)[dom.index_of(z)] / N
    need = math.log(N) ** theta / N
    if dist < need:
        raise DomainError(
            f"x={tuple(np.round(x, 6))} is {dist:.4g} from the boundary, needs >= {need:.4g}")
    g = float(green_diagonal(dom, [z], tol=tol, method=method)[0])
    return g - GAMMA * math.log(N)


def lattice_sD(domain: LatticeDomain, N: int, tol: float | None = None,
               method: str = "auto") -> np.ndarray:
    """G(x, x) − γ ln N at every point of V, without any boundary restriction."""
    return green_diagonal(domain, None, tol=tol, method=method) - GAMMA * math.log(N)


def coarse_cov_matrix(D, D_inner, N: int, xs, tol: float | None = None,
                      theta: float = DEFAULT_THETA, method: str = "auto") -> np.ndarray:
    """Matrix of G^{D_N}(x_i, x_j) − G^{D̃_N}(x_i, x_j) over continuum points."""
    outer = continuum_domain(D, N)
    inner = continuum_domain(D_inner, N)
    if not outer.contains_many(inner.points).all():
        raise DomainError("inner domain is not contained in the outer one")
    clear = clearance_map(inner)
    need = math.log(N) ** theta / N
    zs = []
    for x in xs:
        z = lattice_point(inner, N, x)
        if clear[inner.index_of(z)] / N < need:
            raise DomainError(f"point {tuple(x)} too close to the inner boundary")
        zs.append(z)
    out = np.empty((len(zs), len(zs)))
    cols_o = green_columns(PrecisionOperator(outer), zs, tol=tol, method=method)
    cols_i = green_columns(PrecisionOperator(inner), zs, tol=tol, method=method)
    for j in range(len(zs)):
        for i, z in enumerate(zs):
            out[i, j] = cols_o[j].at(z) - cols_i[j].at(z)
    return out


def coarse_cov(D, D_inner, N: int, x, y, tol: float | None = None,
               theta: float = DEFAULT_THETA, method: str = "auto") -> float:
    """C^{D,D̃}(x, y) at lattice scale N."""
    M = coarse_cov_matrix(D, D_inner, N, [x, y], tol=tol, theta=theta, method=method)
    return float(M[0, 1])


# ---------------------------------------------------------------------------
# uniform bound monitor


@dataclass
class MonitorReport:
    max_residual: float
    rows: list

    def to_json(self) -> dict:
        return {"max_residual": self.max_residual, "rows": self.rows}


def uniform_bound_monitor(domain: LatticeDomain, N: int, pairs, tol: float | None = None,
                          method: str = "auto") -> MonitorReport:
    """sup over pairs of |G(x,y) − γ ln(2 + N max(d(x/N), d(y/N)) / (1 + |x−y|))|.

    d(·) is the l∞ distance to the complement, measured on the lattice.
    """
    pairs = [(tuple(map(int, x)), tuple(map(int, y))) for x, y in pairs]
    clear = clearance_map(domain)
    sources = sorted({y for _, y in pairs})
    cols = {c.source: c for c in green_columns(PrecisionOperator(domain), sources,
                                               tol=tol, method=method)}
    rows = []
    worst = 0.0
    for x, y in pairs:
        g = cols[y].at(x)
        dmax = max(clear[domain.index_of(x)], clear[domain.index_of(y)])
        sep = float(np.linalg.norm(np.subtract(x, y)))
        ref = GAMMA * math.log(2.0 + dmax / (1.0 + sep))
        r = abs(g - ref)
        worst = max(worst, r)
        rows.append({"x": list(x), "y": list(y), "G": g, "reference": ref, "residual": r})
    return MonitorReport(worst, rows)


@dataclass
class GreenDiagnostics:
    gamma_hat: float
    stderr: float
    sD: list = field(default_factory=list)
    uniform_residual: float | None = None

    def to_json(self) -> dict:
        return {"gamma_hat": self.gamma_hat, "stderr": self.stderr, "sD": self.sD,
                "uniform_residual": self.uniform_residual}
