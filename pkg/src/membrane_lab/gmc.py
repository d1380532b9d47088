"""Multiplicative chaos measures on a dyadic cube, built two ways.

* Y_m: split S_n = (0, 2^{-n})^4 into 16^m dyadic subcubes, add m independent
  coarse Gaussian layers (conditional means between consecutive dyadic
  unions) and exponentiate with the subcube s_D correction.
* μ_n: exponentiate the partial sum of the first n eigenmodes of the
  precision operator, normalised by its variance.

Both are realised on the lattice at resolution N.  Cells have side 1/N; each
cell is read at a lattice point inside its own finest subcube (floor of the
cell corner, clamped into the subcube's lattice box).
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
from scipy import stats as sps

from . import stats
from .field import BiharmonicExtension, prepare_sampler
from .green import GAMMA, green_diagonal
from .lattice import DomainError, DyadicCube, LatticeDomain, PrecisionOperator, make_dyadic_union
from .rng import RngStream

SQRT_PI_4 = math.sqrt(math.pi) / 4.0
MAX_EIGEN_POINTS = 7000


@dataclass(frozen=True)
class DyadicTree:
    n: int
    m: int
    dim: int = 4

    @property
    def root(self) -> DyadicCube:
        return DyadicCube(self.n, (0,) * self.dim)

    def cubes(self, j: int) -> list[DyadicCube]:
        """The 2^{dj} subcubes of level n + j tiling the root."""
        return [DyadicCube(self.n + j, idx)
                for idx in itertools.product(range(2**j), repeat=self.dim)]

    @property
    def subcubes(self) -> list[DyadicCube]:
        return self.cubes(self.m)

    def union(self, j: int, N: int) -> LatticeDomain:
        """D̃_{j,N}: lattice approximation of the level-(n+j) union."""
        return make_dyadic_union(self.cubes(j), N, self.dim)

    def check_resolution(self, N: int) -> int:
        """Cells per root side; the finest subcubes need at least 4 cells."""
        per_root = N * 2.0 ** (-self.n)
        if per_root != int(per_root) or N * 2.0 ** (-(self.n + self.m)) < 4 \
                or (N * 2.0 ** (-(self.n + self.m))) % 1:
            raise DomainError(
                f"resolution {N} is misaligned with depth {self.m} at scale {self.n}")
        return int(per_root)


def dyadic_tree(n: int, m: int, dim: int = 4) -> DyadicTree:
    if m < 0 or n < 0:
        raise ValueError("scale and depth must be nonnegative")
    return DyadicTree(n, m, dim)


# ---------------------------------------------------------------------------
# cells


@dataclass
class CellGrid:
    """Cells of side 1/N covering the root cube, each tied to a lattice point."""

    N: int
    centers: np.ndarray
    lattice: np.ndarray
    volume: float
    index: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.centers)


def cell_grid(tree: DyadicTree, N: int, domain: LatticeDomain, depth: int | None = None) -> CellGrid:
    """Cells of the root at resolution N; read points clamp into the level-``depth``
    subcube holding the cell (depth defaults to the tree depth)."""
    per = tree.check_resolution(N) if depth is None else int(N * 2.0 ** (-tree.n))
    depth = tree.m if depth is None else depth
    d = tree.dim
    corners = np.stack(np.meshgrid(*[np.arange(per)] * d, indexing="ij"), -1).reshape(-1, d)
    side = N // 2 ** (tree.n + depth)
    lo = (corners // side) * side + 1
    hi = lo + side - 2
    pts = np.clip(corners, lo, hi)
    return CellGrid(N, (corners + 0.5) / N, pts, float(N) ** (-d), domain.indices_of(pts))


# ---------------------------------------------------------------------------
# measures


@dataclass
class GmcMeasure:
    centers: np.ndarray = field(repr=False)
    weights: np.ndarray
    meta: dict = field(default_factory=dict)

    def total_mass(self) -> float:
        return float(self.weights.sum())


@dataclass
class CoarseGaussianLayer:
    level: int
    values: np.ndarray
    provenance: dict = field(default_factory=dict)


class LayerSampler:
    """Samples the m coarse layers on the root lattice.

    Layer j is the conditional mean of an independent sample of h on
    D̃_{j−1,N} given its values off D̃_{j,N}: the sampled values on the
    separating planes, and their biharmonic extension inside D̃_{j,N}.
    """

    def __init__(self, tree: DyadicTree, N: int, tol: float | None = None,
                 method: str = "auto"):
        tree.check_resolution(N)
        self.tree = tree
        self.N = N
        self.root = tree.union(0, N)
        self.levels = []
        for j in range(1, tree.m + 1):
            outer = tree.union(j - 1, N)
            inner = tree.union(j, N)
            ext = BiharmonicExtension(outer, inner, tol=tol, method=method)
            sampler = prepare_sampler(ext.op_V, method=method, tol=tol)
            pos = self.root.indices_of(outer.points)
            self.levels.append((ext, sampler, pos))

    def sample(self, streams) -> list[np.ndarray]:
        """Per layer, an array (replicas, root points); zero off D̃_{j−1,N}."""
        out = []
        for j, (ext, sampler, pos) in enumerate(self.levels, start=1):
            h = sampler.sample_values([s.child("layer", j) for s in streams])
            vals = np.zeros((len(streams), self.root.size))
            vals[:, pos] = ext.full(h)
            out.append(vals)
        return out


def sample_phi_layers(tree: DyadicTree, N: int, stream: RngStream, tol: float | None = None,
                      sampler: LayerSampler | None = None) -> list[CoarseGaussianLayer]:
    ls = sampler or LayerSampler(tree, N, tol=tol)
    rows = ls.sample([stream])
    return [CoarseGaussianLayer(j + 1, r[0], stream.to_json()) for j, r in enumerate(rows)]


def subcube_sD(tree: DyadicTree, N: int, depth: int | None = None,
               tol: float | None = None) -> np.ndarray:
    """s estimates for one finest subcube (all are translates of each other):
    G^{subcube}(z, z) − γ ln N over its lattice box, indexed like its points."""
    depth = tree.m if depth is None else depth
    cube = DyadicCube(tree.n + depth, (0,) * tree.dim)
    dom = make_dyadic_union([cube], N, tree.dim)
    return green_diagonal(dom, tol=tol) - GAMMA * math.log(N), dom


def _subcube_s_at(grid: CellGrid, tree: DyadicTree, sd: tuple, depth: int) -> np.ndarray:
    vals, dom = sd
    side = grid.N // 2 ** (tree.n + depth)
    local = (grid.lattice - 1) % side + 1
    return vals[dom.indices_of(local)]


def build_Ym(tree: DyadicTree, layers, sD, lam: float, N: int,
             grid: CellGrid | None = None, depth: int | None = None) -> GmcMeasure:
    """Cell weight = volume · √π/4 · exp(πλ Φ(p) + (4λ²/γ) s_subcube(p)).

    ``layers`` is a list of CoarseGaussianLayer or arrays over the root
    lattice; ``sD`` comes from :func:`subcube_sD` for the same depth.
    """
    depth = tree.m if depth is None else depth
    if len(layers) < depth:
        raise ValueError(f"need {depth} layers, got {len(layers)}")
    if sD is None:
        raise ValueError("missing subcube s estimates")
    root = tree.union(0, N)
    grid = grid or cell_grid(tree, N, root, depth)
    phi = np.zeros(root.size)
    for L in layers[:depth]:
        phi = phi + (L.values if isinstance(L, CoarseGaussianLayer) else np.asarray(L))
    s = _subcube_s_at(grid, tree, sD, depth)
    dens = SQRT_PI_4 * np.exp(math.pi * lam * phi[grid.index] + 4 * lam**2 / GAMMA * s)
    return GmcMeasure(grid.centers, grid.volume * dens,
                      {"kind": "Ym", "lambda": lam, "m": depth, "N": N})


def ym_masses(tree: DyadicTree, N: int, lam: float, streams, tol: float | None = None,
              depths=None, batch: int = 16) -> np.ndarray:
    """Total masses of Y_j for j in ``depths`` from shared layers.

    The same layer samples feed every depth, so the rows form one path of the
    martingale.  Returns an array (replicas, len(depths)).
    """
    depths = list(depths) if depths is not None else [tree.m]
    ls = LayerSampler(tree, N, tol=tol)
    sds = {j: subcube_sD(tree, N, j, tol=tol) for j in depths}
    grids = {j: cell_grid(tree, N, ls.root, j) for j in depths}
    ses = {j: _subcube_s_at(grids[j], tree, sds[j], j) for j in depths}
    streams = list(streams)
    out = np.empty((len(streams), len(depths)))
    for s in range(0, len(streams), batch):
        chunk = streams[s:s + batch]
        layers = ls.sample(chunk)
        for c, j in enumerate(depths):
            phi = sum(layers[:j]) if j else np.zeros((len(chunk), ls.root.size))
            g = grids[j]
            dens = np.exp(math.pi * lam * phi[:, g.index] + 4 * lam**2 / GAMMA * ses[j])
            out[s:s + len(chunk), c] = SQRT_PI_4 * g.volume * dens.sum(axis=1)
    return out


def ym_exact_mean(tree: DyadicTree, N: int, lam: float, depth: int | None = None,
                  tol: float | None = None) -> float:
    """E⟨Y_m, 1⟩ from Green diagonals: Var Φ_m(p) = G^{D̃_0}(p,p) − G^{D̃_m}(p,p)."""
    depth = tree.m if depth is None else depth
    root = tree.union(0, N)
    grid = cell_grid(tree, N, root, depth)
    g0 = green_diagonal(root, grid.lattice, tol=tol)
    inner = tree.union(depth, N)
    gm = green_diagonal(inner, grid.lattice, tol=tol)
    s = _subcube_s_at(grid, tree, subcube_sD(tree, N, depth, tol=tol), depth)
    c = 4 * lam**2 / GAMMA
    # ½(πλ)² = 4λ²/γ
    return float(SQRT_PI_4 * grid.volume * np.sum(np.exp(c * (g0 - gm + s))))


def zlambda_mean(D, lam: float, sD: np.ndarray, domain: LatticeDomain, N: int) -> float:
    """√π/4 · ∫_D e^{(4λ²/γ) s_D(x)} dx by the cell rule on the lattice of D."""
    sD = np.asarray(sD, float)
    if sD.shape != (domain.size,) or not np.all(np.isfinite(sD)):
        raise ValueError("s estimates do not cover the quadrature grid")
    cube = D if isinstance(D, DyadicCube) else DyadicCube(0, (0,) * domain.dim)
    tree = DyadicTree(cube.level, 0, domain.dim)
    grid = cell_grid(tree, N, domain, 0)
    return float(SQRT_PI_4 * grid.volume * np.sum(np.exp(4 * lam**2 / GAMMA * sD[grid.index])))


# ---------------------------------------------------------------------------
# spectral construction


class SpectralBasis:
    """Eigenmodes of the precision operator, smoothest (smallest eigenvalue) first.

    f_k = v_k / √μ_k has unit ⟨·,·⟩_Δ norm, and Σ_k f_k f_kᵀ = A^{-1}.
    """

    def __init__(self, op: PrecisionOperator, max_points: int = MAX_EIGEN_POINTS):
        if op.n > max_points:
            raise DomainError(f"dense eigendecomposition limited to {max_points} points")
        self.op = op
        mu, V = la.eigh(op.dense())
        self.eigenvalues = mu
        self.modes = V / np.sqrt(mu)
        # running Σ_{k ≤ n} f_k(x)² for every n is too large; store the full one
        self.full_variance = np.einsum("ij,ij->i", self.modes, self.modes)

    @property
    def size(self) -> int:
        return self.op.n

    def variance(self, n: int) -> np.ndarray:
        F = self.modes[:, :n]
        return np.einsum("ij,ij->i", F, F)

    def partial_sums(self, n: int, z: np.ndarray) -> np.ndarray:
        return z[:, :n] @ self.modes[:, :n].T


def spectral_masses(domain: LatticeDomain, beta: float, mode_count: int, streams, N: int,
                    basis: SpectralBasis | None = None, weight: np.ndarray | None = None,
                    tol: float | None = None, batch: int = 64) -> np.ndarray:
    """Total masses of μ_n for each stream (optionally times a per-point weight).

    The full mode count on a domain too large for an eigendecomposition uses
    an exact field sample, which has the law of the full partial sum.
    """
    n_pts = domain.size
    if mode_count < 0 or mode_count > n_pts:
        raise ValueError(f"mode count {mode_count} outside [0, {n_pts}]")
    tree = DyadicTree(0, 0, domain.dim)
    grid = cell_grid(tree, N, domain, 0)
    w = np.ones(n_pts) if weight is None else np.asarray(weight, float)
    streams = list(streams)
    out = np.empty(len(streams))
    if mode_count == 0:
        out[:] = grid.volume * w[grid.index].sum()
        return out
    if basis is None and mode_count == n_pts and n_pts > MAX_EIGEN_POINTS:
        sampler = prepare_sampler(PrecisionOperator(domain), tol=tol)
        var = green_diagonal(domain, tol=tol)
        draw = lambda ch: sampler.sample_values(ch)
    else:
        basis = basis or SpectralBasis(PrecisionOperator(domain))
        var = basis.full_variance if mode_count == n_pts else basis.variance(mode_count)
        draw = lambda ch: basis.partial_sums(
            mode_count, np.stack([s.generator().standard_normal(n_pts) for s in ch]))
    for s in range(0, len(streams), batch):
        chunk = streams[s:s + batch]
        phi = draw(chunk)
        dens = np.exp(beta * phi[:, grid.index] - 0.5 * beta**2 * var[grid.index])
        out[s:s + len(chunk)] = grid.volume * (dens * w[grid.index]).sum(axis=1)
    return out


def spectral_gmc(domain: LatticeDomain, beta: float, mode_count: int, stream: RngStream, N: int,
                 basis: SpectralBasis | None = None) -> GmcMeasure:
    """μ_n with density exp(β φ_n − ½ β² Var φ_n) on cells of side 1/N."""
    if mode_count < 0 or mode_count > domain.size:
        raise ValueError(f"mode count {mode_count} outside [0, {domain.size}]")
    tree = DyadicTree(0, 0, domain.dim)
    grid = cell_grid(tree, N, domain, 0)
    if mode_count == 0:
        dens = np.ones(grid.size)
    else:
        basis = basis or SpectralBasis(PrecisionOperator(domain))
        z = stream.generator().standard_normal((1, domain.size))
        phi = basis.partial_sums(mode_count, z)[0]
        var = basis.variance(mode_count)
        dens = np.exp(beta * phi[grid.index] - 0.5 * beta**2 * var[grid.index])
    return GmcMeasure(grid.centers, grid.volume * dens,
                      {"kind": "spectral", "beta": beta, "mode_count": mode_count, "N": N})


def full_basis_defect(basis: SpectralBasis, beta: float, stream: RngStream) -> float:
    """max |density(all modes) − exp(β h − ½ β² G(x,x))| for h = Σ Z_k f_k.

    G(x, x) comes from a Cholesky inverse, independent of the eigenbasis.
    """
    z = stream.generator().standard_normal((1, basis.size))
    h = basis.partial_sums(basis.size, z)[0]
    spectral = np.exp(beta * h - 0.5 * beta**2 * basis.full_variance)
    A = basis.op.dense()
    G_diag = np.diag(la.cho_solve(la.cho_factor(A), np.eye(basis.size)))
    direct = np.exp(beta * h - 0.5 * beta**2 * G_diag)
    return float(np.max(np.abs(spectral - direct) / direct))


@dataclass
class Comparison:
    mean_ratio: float
    ratio_stderr: float
    ks_statistic: float
    ks_pvalue: float
    n_ym: int
    n_spectral: int

    def to_json(self) -> dict:
        return {"mean_ratio": self.mean_ratio, "ratio_stderr": self.ratio_stderr,
                "ks_statistic": self.ks_statistic, "ks_pvalue": self.ks_pvalue,
                "n_ym": self.n_ym, "n_spectral": self.n_spectral}


def compare_constructions(ym: np.ndarray, spectral: np.ndarray, lam: float | None = None) -> Comparison:
    """Mean ratio and two-sample Kolmogorov–Smirnov distance of total masses."""
    a = np.asarray(ym, float).ravel()
    b = np.asarray(spectral, float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least two replicas of each construction")
    sa, sb = stats.summarize(a), stats.summarize(b)
    ratio = sa.mean / sb.mean
    se = ratio * math.sqrt((sa.stderr / sa.mean) ** 2 + (sb.stderr / sb.mean) ** 2)
    ks = sps.ks_2samp(a, b)
    return Comparison(ratio, se, float(ks.statistic), float(ks.pvalue), a.size, b.size)


# ---------------------------------------------------------------------------
# persistence


def save_measure(measure: GmcMeasure, path) -> Path:
    """CSV rows (cell, center coordinates, weight) plus a JSON sidecar with meta."""
    path = Path(path)
    d = measure.centers.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", *[f"x{i}" for i in range(d)], "weight"])
        for i, (c, wt) in enumerate(zip(measure.centers, measure.weights)):
            w.writerow([i, *("%.17g" % v for v in c), "%.17g" % wt])
    meta = dict(measure.meta, cells=int(len(measure.weights)), total_mass=measure.total_mass())
    path.with_name(path.name + ".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return path


def load_measure(path) -> GmcMeasure:
    path = Path(path)
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads(path.with_name(path.name + ".meta.json").read_text())
    meta.pop("cells", None)
    meta.pop("total_mass", None)
    return GmcMeasure(raw[:, 1:-1], raw[:, -1], meta)


def ym_measure(tree: DyadicTree, N: int, lam: float, stream: RngStream,
               tol: float | None = None) -> GmcMeasure:
    layers = sample_phi_layers(tree, N, stream, tol=tol)
    return build_Ym(tree, layers, subcube_sD(tree, N, tol=tol), lam, N)


def refinement_average(tree: DyadicTree, N: int, lam: float, stream: RngStream,
                       resamples: int, tol: float | None = None):
    """Y_{m−1} subcube masses against the average of Y_m over fresh layer m.

    Layers 1..m−1 are drawn once from ``stream``; layer m is redrawn
    ``resamples`` times.  Masses are summed over the level-m subcubes.
    Returns (coarse masses, mean refined masses, standard errors).
    """
    m = tree.m
    if m < 1:
        raise ValueError("refinement needs depth >= 1")
    ls = LayerSampler(tree, N, tol=tol)
    frozen = ls.sample([stream.child("frozen")])
    phi = sum(layer[0] for layer in frozen[:m - 1]) if m > 1 else np.zeros(ls.root.size)
    fine = cell_grid(tree, N, ls.root, m)
    coarse = cell_grid(tree, N, ls.root, m - 1)
    side = N // 2 ** (tree.n + m)
    groups = np.ravel_multi_index(tuple((np.floor(fine.centers * N).astype(int) // side).T),
                                  (2**m,) * tree.dim)
    c = 4 * lam**2 / GAMMA
    s_c = _subcube_s_at(coarse, tree, subcube_sD(tree, N, m - 1, tol=tol), m - 1)
    s_f = _subcube_s_at(fine, tree, subcube_sD(tree, N, m, tol=tol), m)
    w_c = SQRT_PI_4 * coarse.volume * np.exp(math.pi * lam * phi[coarse.index] + c * s_c)
    base = np.bincount(groups, w_c, minlength=16**m)
    rows = []
    for i in range(resamples):
        last = ls.sample([stream.child("fresh", i)])[m - 1][0]
        dens = np.exp(math.pi * lam * (phi + last)[fine.index] + c * s_f)
        rows.append(np.bincount(groups, SQRT_PI_4 * fine.volume * dens, minlength=16**m))
    rows = np.array(rows)
    return base, rows.mean(axis=0), rows.std(axis=0, ddof=1) / math.sqrt(resamples)
