"""Exact sampling of the membrane model and its Gibbs–Markov decomposition.

Samplers draw h ~ N(0, A^{-1}) for the precision operator A of a domain:

* dense: A = RᵀR (Cholesky), h = R^{-1} z;
* iterative: A = BᵀB with B the Laplacian from V into V ∪ ∂₁V, and
  h = A^{-1} Bᵀ z with z white noise on V ∪ ∂₁V.  The covariance is
  A^{-1} BᵀB A^{-1} = A^{-1}, exact up to the solver tolerance.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la

from .lattice import (
    BoxHierarchy, DomainError, LatticeDomain, PrecisionOperator, _lap_valid,
    bilaplacian_stencil, domain_from_json, hierarchy as make_hierarchy,
)
from .rng import RngStream
from .solvers import LinearSolver

BASIS_MAX_POINTS = 2000


@dataclass
class FieldSample:
    domain: LatticeDomain = field(repr=False)
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def at(self, z) -> float:
        return float(self.values[self.domain.index_of(z)])


# ---------------------------------------------------------------------------
# samplers


class FactorizedGaussian:
    """Prepared sampler for N(0, A^{-1}) on one domain."""

    def __init__(self, op: PrecisionOperator, method: str = "auto",
                 tol: float | None = None, max_dense: int | None = None):
        self.op = op
        self.domain = op.domain
        self.solver = LinearSolver(op, method=method, tol=tol, max_dense=max_dense)
        self.method = "dense-factor" if self.solver.method == "dense" else "iterative-sqrt"
        self.tol = self.solver.tol
        if self.method == "dense-factor":
            R, lower = self.solver.cholesky
            if lower:
                raise RuntimeError("expected an upper Cholesky factor")
            self._R = R
            self.noise_size = self.domain.size
        else:
            dom = self.domain
            grown = dom.mask.copy()
            d = dom.dim
            for i in range(d):
                lo = (slice(None),) * i + (slice(1, None),)
                hi = (slice(None),) * i + (slice(None, -1),)
                grown[lo] |= dom.mask[hi]
                grown[hi] |= dom.mask[lo]
            self._noise_at = tuple(np.nonzero(grown))
            self.noise_size = int(grown.sum())

    def _white(self, stream: RngStream) -> np.ndarray:
        return stream.generator().standard_normal(self.noise_size)

    def from_noise(self, z: np.ndarray) -> np.ndarray:
        """Map white noise rows to field rows."""
        z = np.atleast_2d(z)
        if self.method == "dense-factor":
            return la.solve_triangular(self._R, z.T, lower=False).T
        dom = self.domain
        arr = np.zeros((len(z),) + dom.array_shape)
        arr[(slice(None),) + self._noise_at] = z
        # Bᵀz is the Laplacian of the noise, read back on V
        lap = _lap_valid(arr, dom.dim)
        rhs = lap[(slice(None),) + tuple((dom.points - dom.origin - 1).T)]
        x, _ = self.solver.solve(rhs)
        return x

    def sample_values(self, streams) -> np.ndarray:
        z = np.stack([self._white(s) for s in streams])
        return self.from_noise(z)


def prepare_sampler(op: PrecisionOperator, method: str = "auto", tol: float | None = None,
                    max_dense: int | None = None) -> FactorizedGaussian:
    return FactorizedGaussian(op, method=method, tol=tol, max_dense=max_dense)


def sample(sampler: FactorizedGaussian, stream: RngStream) -> FieldSample:
    vals = sampler.sample_values([stream])[0]
    return FieldSample(sampler.domain, vals, stream.to_json())


def sample_many(sampler: FactorizedGaussian, streams, batch: int = 32) -> np.ndarray:
    """Rows of field values, one per stream.  Batches are cut by position."""
    streams = list(streams)
    out = np.empty((len(streams), sampler.domain.size))
    for s in range(0, len(streams), batch):
        out[s:s + batch] = sampler.sample_values(streams[s:s + batch])
    return out


# ---------------------------------------------------------------------------
# orthonormal basis sampler


class BasisSampler:
    """Gram–Schmidt basis of coordinate indicators, orthonormal under ⟨·,·⟩_Δ.

    With A the precision matrix, ⟨f, g⟩_Δ = fᵀ A g, and h = Σ φ_n Z_n has
    covariance Σ φ_n φ_nᵀ = A^{-1}.
    """

    def __init__(self, op: PrecisionOperator, max_points: int = BASIS_MAX_POINTS):
        n = op.n
        if n > max_points:
            raise DomainError(f"basis sampler limited to {max_points} points, got {n}")
        self.op = op
        self.domain = op.domain
        A = op.sparse
        phi = np.zeros((n, n))
        for k in range(n):
            v = np.zeros(n)
            v[k] = 1.0
            # classical Gram–Schmidt, applied twice for stability
            for _ in range(2):
                if k:
                    c = phi[:, :k].T @ (A @ v)
                    v -= phi[:, :k] @ c
            v /= math.sqrt(float(v @ (A @ v)))
            phi[:, k] = v
        self.basis = phi

    def gram(self) -> np.ndarray:
        return self.basis.T @ (self.op.sparse @ self.basis)

    def covariance(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def sample_values(self, streams) -> np.ndarray:
        n = self.domain.size
        z = np.stack([s.generator().standard_normal(n) for s in streams])
        return z @ self.basis.T


def sample_via_basis(op_or_sampler, stream: RngStream) -> FieldSample:
    bs = op_or_sampler if isinstance(op_or_sampler, BasisSampler) else BasisSampler(op_or_sampler)
    return FieldSample(bs.domain, bs.sample_values([stream])[0], stream.to_json())


# ---------------------------------------------------------------------------
# conditional means


def conditional_coefficients(d: int) -> dict:
    """Single-site conditional-mean weights −A(x, y)/A(x, x) by offset."""
    st = bilaplacian_stencil(d)
    center = st[(0,) * d]
    return {o: -c / center for o, c in st.entries.items() if any(o)}


def _select(V: LatticeDomain, U) -> np.ndarray:
    """Boolean mask over V for a sub-domain, point list or mask."""
    if isinstance(U, LatticeDomain):
        pts = U.points
    else:
        U = np.asarray(U)
        if U.dtype == bool:
            if U.shape != (V.size,):
                raise DomainError("mask length differs from the domain size")
            return U.copy()
        pts = U.reshape(-1, V.dim)
    keep = np.zeros(V.size, dtype=bool)
    keep[V.indices_of(pts)] = True
    return keep


class BiharmonicExtension:
    """φ_U = −A_UU^{-1} A_{U,V∖U} h_{V∖U}: the conditional mean of h^V on U
    given the field on V∖U, and the discrete-biharmonic extension of that
    data into U."""

    def __init__(self, V: LatticeDomain, U, tol: float | None = None,
                 method: str = "auto"):
        self.V = V
        self.in_U = _select(V, U)
        self.u_idx = np.nonzero(self.in_U)[0]
        self.o_idx = np.nonzero(~self.in_U)[0]
        # keep a given sub-domain: its box partition feeds the preconditioner
        self.U = U if isinstance(U, LatticeDomain) else V.subdomain(self.in_U)
        self.op_V = PrecisionOperator(V)
        self.op_U = PrecisionOperator(self.U)
        self.solver = LinearSolver(self.op_U, method=method, tol=tol)

    def _embed_outside(self, outside: np.ndarray) -> np.ndarray:
        outside = np.asarray(outside, float)
        full = np.zeros(outside.shape[:-1] + (self.V.size,))
        full[..., self.o_idx] = outside
        return full

    def extend(self, outside: np.ndarray) -> np.ndarray:
        """Values on U (ordered as U's points) from values on V∖U."""
        full = self._embed_outside(outside)
        rhs = -self.op_V.apply(full)[..., self.u_idx]
        x, _ = self.solver.solve(rhs)
        return x

    def from_field(self, h: np.ndarray) -> np.ndarray:
        return self.extend(np.asarray(h)[..., self.o_idx])

    def full(self, h: np.ndarray) -> np.ndarray:
        """φ^{V,U} on all of V: h outside U, the extension inside."""
        h = np.asarray(h, float)
        out = h.copy()
        out[..., self.u_idx] = self.from_field(h)
        return out

    def bilaplacian_defect(self, outside: np.ndarray, phi: np.ndarray) -> float:
        """max over U of |Δ²φ| with the outside data and zeros beyond V."""
        full = self._embed_outside(outside)
        full[..., self.u_idx] = phi
        return float(np.abs(self.op_V.apply(full)[..., self.u_idx]).max())


def conditional_mean(outside_values, V: LatticeDomain, U, tol: float | None = None) -> np.ndarray:
    return BiharmonicExtension(V, U, tol=tol).extend(outside_values)


# ---------------------------------------------------------------------------
# Gibbs–Markov decomposition


def gibbs_markov_split(V: LatticeDomain, U, stream: RngStream, tol: float | None = None,
                       method: str = "auto"):
    """(h^U extended by zero to V, φ^{V,U} on V) from independent samples.

    h^U + φ^{V,U} has the law of h^V.
    """
    ext = BiharmonicExtension(V, U, tol=tol, method=method)
    hU = prepare_sampler(ext.op_U, method=method, tol=tol).sample_values([stream.child("inner")])[0]
    hV = prepare_sampler(ext.op_V, method=method, tol=tol).sample_values([stream.child("outer")])[0]
    inner = np.zeros(V.size)
    inner[ext.u_idx] = hU
    phi = ext.full(hV)
    prov = stream.to_json()
    return FieldSample(V, inner, prov), FieldSample(V, phi, prov)


def gibbs_markov_covariance_gap(V: LatticeDomain, U) -> float:
    """max |G^V − G^U − Cov(φ^{V,U})| by dense linear algebra."""
    in_U = _select(V, U)
    u = np.nonzero(in_U)[0]
    o = np.nonzero(~in_U)[0]
    A = PrecisionOperator(V).dense()
    GV = la.cho_solve(la.cho_factor(A), np.eye(V.size))
    A_UU = A[np.ix_(u, u)]
    GU = la.cho_solve(la.cho_factor(A_UU), np.eye(len(u)))
    # φ = P h_O with P = [I ; −A_UU^{-1} A_UO]
    K = -GU @ A[np.ix_(u, o)]
    # on O both sides equal G^V_OO identically, so only the U rows are compared
    KG = K @ GV[np.ix_(o, o)]
    gap = float(np.abs(GV[np.ix_(u, o)] - KG).max()) if len(o) else 0.0
    gap = max(gap, float(np.abs(GV[np.ix_(u, u)] - GU - KG @ K.T).max()))
    return gap


# ---------------------------------------------------------------------------
# coarse fields


@dataclass
class CoarseField:
    x: tuple
    levels: list
    values: np.ndarray
    hierarchy: BoxHierarchy = field(repr=False)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[..., self.levels.index(k)]


class CoarseProbe:
    """S_k(x) as a fixed linear functional of h.

    With g = G^{Δ^k}(·, x), S_k(x) = −gᵀ A_{Δ^k, rest} h_rest = wᵀh where w
    is −A g restricted to the complement of Δ^k.  One Green solve per (x, k)
    replaces a biharmonic-extension solve per sample.
    """

    def __init__(self, V: LatticeDomain, x, k: int, hier: BoxHierarchy,
                 levels: str = "hierarchy", tol: float | None = None):
        self.x = tuple(int(c) for c in x)
        self.k = k
        self.kind = "zero"
        if k == 0:
            self.kind = "point"
            self.index = V.index_of(self.x)
            return
        box = hier.box(k) if levels == "hierarchy" else hier.level_box(k)
        in_U = np.zeros(V.size, dtype=bool)
        in_U[V.indices_of(box.points())] = True
        if in_U.all():
            return
        self.kind = "linear"
        U = LatticeDomain(V.dim, boxes=[box])
        op_U = PrecisionOperator(U)
        e = np.zeros(U.size)
        e[U.index_of(self.x)] = 1.0
        g, _ = LinearSolver(op_U, tol=tol).solve(e)
        full = np.zeros(V.size)
        full[in_U] = g
        w = -PrecisionOperator(V).apply(full)
        w[in_U] = 0.0
        nz = np.nonzero(w)[0]
        self.index = nz
        self.weights = w[nz]

    def __call__(self, h: np.ndarray) -> np.ndarray:
        h = np.asarray(h, float)
        if self.kind == "point":
            return h[..., self.index]
        if self.kind == "zero":
            return np.zeros(h.shape[:-1])
        return h[..., self.index] @ self.weights


def coarse_probes(V: LatticeDomain, x, k_range, levels: str = "hierarchy",
                  tol: float | None = None, hier: BoxHierarchy | None = None) -> list:
    hier = hier or make_hierarchy(V, x)
    ks = list(k_range)
    if levels == "hierarchy":
        bad = [k for k in ks if k < 0 or k > hier.n_x]
        if bad:
            raise DomainError(f"levels {bad} outside [0, n(x)={hier.n_x}]")
    elif any(k < 0 for k in ks):
        raise DomainError("levels must be nonnegative")
    return [CoarseProbe(V, x, k, hier, levels=levels, tol=tol) for k in ks]


def coarse_field(h: FieldSample | np.ndarray, x, k_range, domain: LatticeDomain | None = None,
                 levels: str = "hierarchy", tol: float | None = None,
                 probes: list | None = None) -> CoarseField:
    """S_k(x) for k in ``k_range``.

    ``levels="hierarchy"`` uses Δ^k(x) (with Δ^{n(x)} = D_N); ``"radius"``
    uses Λ_{⌊e^k⌋}(x) ∩ D_N for every k ≥ 1.
    """
    if isinstance(h, FieldSample):
        domain, vals = h.domain, h.values
    else:
        vals = np.asarray(h, float)
    hier = make_hierarchy(domain, x)
    ks = list(k_range)
    probes = probes or coarse_probes(domain, x, ks, levels=levels, tol=tol, hier=hier)
    values = np.stack([p(vals) for p in probes], axis=-1)
    return CoarseField(tuple(int(c) for c in x), ks, values, hier)


# ---------------------------------------------------------------------------
# snapshots

_MAGIC = b"MLFS"
_VERSION = 1


def save_snapshot(sample: FieldSample, path) -> Path:
    """Flat binary (header + float64 payload in index order) plus a JSON sidecar."""
    path = Path(path)
    desc = json.dumps(sample.domain.descriptor, sort_keys=True).encode()
    seed = int(sample.provenance.get("master_seed", -1))
    header = _MAGIC + struct.pack("<IIqqI", _VERSION, sample.domain.dim,
                                  sample.domain.size, seed, len(desc)) + desc
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(sample.values, dtype="<f8").tobytes())
    side = {"descriptor": sample.domain.descriptor, "provenance": sample.provenance,
            "size": sample.domain.size, "dtype": "<f8", "version": _VERSION}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def load_snapshot(path) -> FieldSample:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a field snapshot")
    version, dim, size, seed, dlen = struct.unpack_from("<IIqqI", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = 4 + struct.calcsize("<IIqqI")
    desc = json.loads(raw[off:off + dlen])
    vals = np.frombuffer(raw[off + dlen:], dtype="<f8").copy()
    if vals.size != size:
        raise ValueError("snapshot payload length mismatch")
    prov = {"master_seed": seed}
    side = Path(str(path) + ".json")
    if side.exists():
        prov = json.loads(side.read_text()).get("provenance", prov)
    return FieldSample(domain_from_json(desc), vals, prov)
