"""Lattice domains, discrete Laplacian/bilaplacian stencils and the precision
operator of the membrane model.

A domain is a finite subset V of Z^d.  The field vanishes outside V, so the
precision operator is the bilaplacian stencil restricted to V x V.  Vectors
indexed by a domain follow the lexicographic order of its points.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class DomainError(ValueError):
    """Invalid domain construction or a point outside its domain."""


# ---------------------------------------------------------------------------
# stencils


@dataclass(frozen=True)
class Stencil:
    entries: dict
    order: int
    dim: int

    def offsets(self) -> np.ndarray:
        return np.array(sorted(self.entries), dtype=np.int64).reshape(-1, self.dim)

    def coefficients(self) -> np.ndarray:
        return np.array([float(self.entries[o]) for o in sorted(self.entries)])

    def __getitem__(self, offset) -> Fraction:
        return self.entries.get(tuple(offset), Fraction(0))


def laplacian_stencil(d: int) -> Stencil:
    """Normalized Laplacian: average of neighbour differences (factor 1/2d)."""
    if d < 1:
        raise DomainError("dimension must be >= 1")
    entries = {(0,) * d: Fraction(-1)}
    for i in range(d):
        for s in (1, -1):
            o = [0] * d
            o[i] = s
            entries[tuple(o)] = Fraction(1, 2 * d)
    return Stencil(entries, 1, d)


def _compose(a: Stencil, b: Stencil) -> Stencil:
    out: dict = {}
    for oa, ca in a.entries.items():
        for ob, cb in b.entries.items():
            o = tuple(x + y for x, y in zip(oa, ob))
            out[o] = out.get(o, Fraction(0)) + ca * cb
    out = {o: c for o, c in out.items() if c != 0}
    return Stencil(out, a.order + b.order, a.dim)


def bilaplacian_stencil(d: int) -> Stencil:
    """Exact rational coefficients of Δ∘Δ on Z^d."""
    lap = laplacian_stencil(d)
    return _compose(lap, lap)


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class LatticeBox:
    """Closed integer box lo <= z <= hi (componentwise)."""

    lo: tuple
    hi: tuple

    @property
    def shape(self) -> tuple:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def contains(self, z) -> bool:
        return all(l <= c <= h for l, c, h in zip(self.lo, z, self.hi))

    def points(self) -> np.ndarray:
        axes = [np.arange(l, h + 1) for l, h in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1).astype(np.int64)

    def intersect(self, other: "LatticeBox") -> "LatticeBox | None":
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(l > h for l, h in zip(lo, hi)):
            return None
        return LatticeBox(lo, hi)


@dataclass(frozen=True)
class DyadicCube:
    """Open cube prod_k (i_k 2^-level, (i_k+1) 2^-level)."""

    level: int
    index: tuple

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        s = 2.0 ** (-self.level)
        i = np.asarray(self.index, dtype=float)
        return i * s, (i + 1) * s

    def lattice_box(self, N: int) -> LatticeBox:
        # cube side in lattice units must be an integer >= 2
        side = Fraction(N) * Fraction(2) ** (-self.level)
        if side.denominator != 1 or side < 2:
            raise DomainError(
                f"resolution {N} does not align cube of level {self.level}")
        s = int(side)
        lo = tuple(int(i) * s + 1 for i in self.index)
        hi = tuple(int(i) * s + s - 1 for i in self.index)
        return LatticeBox(lo, hi)

    def to_json(self) -> dict:
        return {"level": int(self.level), "index": [int(i) for i in self.index]}


class LatticeDomain:
    """Finite V ⊂ Z^d with a dense index map.

    ``boxes`` is a partition of V into integer boxes when one is known (boxes
    and dyadic unions); solvers use it to build fast preconditioners.
    """

    PAD = 2

    def __init__(self, dim: int, points: np.ndarray | None = None, *,
                 boxes: Sequence[LatticeBox] | None = None,
                 descriptor: dict | None = None):
        if boxes is None and points is None:
            raise DomainError("need points or boxes")
        self.dim = int(dim)
        self.boxes = tuple(boxes) if boxes is not None else None
        self.descriptor = descriptor or {"dim": self.dim, "kind": "points"}
        if points is not None:
            pts = np.asarray(points, dtype=np.int64).reshape(-1, self.dim)
            if len(pts) == 0:
                raise DomainError("empty domain")
            order = np.lexsort(pts.T[::-1])
            pts = pts[order]
            if len(pts) > 1 and np.any(np.all(pts[1:] == pts[:-1], axis=1)):
                raise DomainError("duplicate points")
            self._points = pts
            lo = pts.min(axis=0)
            hi = pts.max(axis=0)
        else:
            lo = np.min([b.lo for b in self.boxes], axis=0)
            hi = np.max([b.hi for b in self.boxes], axis=0)
            self._points = None
        self.lo = lo.astype(np.int64)
        self.hi = hi.astype(np.int64)
        # padded bounding array: origin at lo - PAD
        self.origin = self.lo - self.PAD
        self.array_shape = tuple(int(s) for s in (self.hi - self.lo + 1 + 2 * self.PAD))

    # -- basic structure ---------------------------------------------------
    @cached_property
    def points(self) -> np.ndarray:
        if self._points is None:
            pts = np.concatenate([b.points() for b in self.boxes])
            order = np.lexsort(pts.T[::-1])
            self._points = pts[order]
        return self._points

    @cached_property
    def size(self) -> int:
        if self._points is None:
            return sum(b.size for b in self.boxes)
        return len(self._points)

    def __len__(self) -> int:
        return self.size

    @cached_property
    def single_box(self) -> LatticeBox | None:
        """The box itself when V is exactly one integer box."""
        if self.boxes is not None and len(self.boxes) == 1:
            return self.boxes[0]
        if self._points is not None:
            b = LatticeBox(tuple(self.lo), tuple(self.hi))
            if b.size == len(self._points):
                return b
        return None

    @cached_property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.array_shape, dtype=bool)
        m[tuple((self.points - self.origin).T)] = True
        return m

    @cached_property
    def lookup(self) -> np.ndarray:
        """Padded bounding array holding the dense index of each point, -1 outside."""
        lk = np.full(self.array_shape, -1, dtype=np.int64)
        lk[tuple((self.points - self.origin).T)] = np.arange(self.size)
        return lk

    @cached_property
    def _inner(self) -> tuple:
        return tuple(slice(self.PAD, s - self.PAD) for s in self.array_shape)

    def index_of(self, z) -> int:
        z = np.asarray(z, dtype=np.int64)
        rel = z - self.origin
        if np.any(rel < 0) or np.any(rel >= self.array_shape):
            raise DomainError(f"{tuple(z)} not in domain")
        i = int(self.lookup[tuple(rel)])
        if i < 0:
            raise DomainError(f"{tuple(z)} not in domain")
        return i

    def indices_of(self, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=np.int64).reshape(-1, self.dim)
        rel = zs - self.origin
        ok = np.all((rel >= 0) & (rel < np.array(self.array_shape)), axis=1)
        out = np.full(len(zs), -1, dtype=np.int64)
        out[ok] = self.lookup[tuple(rel[ok].T)]
        if np.any(out < 0):
            raise DomainError("point(s) not in domain")
        return out

    def contains(self, z) -> bool:
        try:
            self.index_of(z)
        except DomainError:
            return False
        return True

    def contains_many(self, zs) -> np.ndarray:
        zs = np.asarray(zs, dtype=np.int64).reshape(-1, self.dim)
        rel = zs - self.origin
        ok = np.all((rel >= 0) & (rel < np.array(self.array_shape)), axis=1)
        out = np.zeros(len(zs), dtype=bool)
        out[ok] = self.mask[tuple(rel[ok].T)]
        return out

    # -- vector <-> padded array -------------------------------------------
    def embed(self, v: np.ndarray) -> np.ndarray:
        """Place vector(s) indexed by V into the zero-padded bounding array."""
        v = np.asarray(v, dtype=float)
        lead = v.shape[:-1]
        out = np.zeros(lead + self.array_shape)
        if self.single_box is not None:
            out[(Ellipsis,) + self._inner] = v.reshape(lead + self.single_box.shape)
        else:
            out[(Ellipsis,) + tuple((self.points - self.origin).T)] = v
        return out

    def extract(self, arr: np.ndarray) -> np.ndarray:
        lead = arr.shape[: arr.ndim - self.dim]
        if self.single_box is not None:
            return arr[(Ellipsis,) + self._inner].reshape(lead + (self.size,))
        return arr[(Ellipsis,) + tuple((self.points - self.origin).T)]

    # -- geometry -----------------------------------------------------------
    def subdomain(self, keep: np.ndarray, descriptor: dict | None = None) -> "LatticeDomain":
        """Domain of the points selected by a boolean mask over V."""
        return LatticeDomain(self.dim, self.points[np.asarray(keep, bool)],
                             descriptor=descriptor)

    def to_json(self) -> dict:
        return dict(self.descriptor)

    def __repr__(self) -> str:
        return f"LatticeDomain({self.descriptor}, size={self.size})"


def make_box(d: int, N: int) -> LatticeDomain:
    """D_N = (0,N)^d ∩ Z^d."""
    if d < 1:
        raise DomainError("dimension must be >= 1")
    if N < 2:
        raise DomainError(f"box side {N} gives an empty domain")
    box = LatticeBox((1,) * d, (N - 1,) * d)
    return LatticeDomain(d, boxes=[box],
                         descriptor={"dim": d, "kind": "box", "side": int(N)})


def make_lattice_box(lo: Sequence[int], hi: Sequence[int]) -> LatticeDomain:
    box = LatticeBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi))
    if any(s < 1 for s in box.shape):
        raise DomainError("empty box")
    return LatticeDomain(len(box.lo), boxes=[box],
                         descriptor={"dim": len(box.lo), "kind": "lattice_box",
                                     "lo": list(box.lo), "hi": list(box.hi)})


def _as_cube(c) -> DyadicCube:
    if isinstance(c, DyadicCube):
        return c
    if isinstance(c, dict):
        return DyadicCube(int(c["level"]), tuple(int(i) for i in c["index"]))
    level, index = c
    return DyadicCube(int(level), tuple(int(i) for i in index))


def cubes_overlap(a: DyadicCube, b: DyadicCube) -> bool:
    alo, ahi = a.bounds()
    blo, bhi = b.bounds()
    return bool(np.all(np.maximum(alo, blo) < np.minimum(ahi, bhi)))


def make_dyadic_union(cubes: Iterable, N: int, dim: int | None = None) -> LatticeDomain:
    """Lattice approximation {z ∈ Z^d : z/N ∈ D} of a finite union of open
    dyadic cubes.

    The integer points on shared faces are excluded, so every lattice point
    keeps l∞ distance at least 1 from N·D^c.
    """
    cubes = [_as_cube(c) for c in cubes]
    if not cubes:
        raise DomainError("no cubes given")
    d = dim or len(cubes[0].index)
    if any(len(c.index) != d for c in cubes):
        raise DomainError("cube dimensions disagree")
    for a, b in itertools.combinations(cubes, 2):
        if cubes_overlap(a, b):
            raise DomainError(f"overlapping cubes {a} and {b}")
    boxes = [c.lattice_box(N) for c in cubes]
    desc = {"dim": d, "kind": "dyadic_union",
            "cubes": [c.to_json() for c in cubes], "resolution": int(N)}
    return LatticeDomain(d, boxes=boxes, descriptor=desc)


def domain_from_json(desc: dict) -> LatticeDomain:
    kind = desc.get("kind")
    if kind == "box":
        return make_box(int(desc["dim"]), int(desc["side"]))
    if kind == "dyadic_union":
        return make_dyadic_union(desc["cubes"], int(desc["resolution"]), int(desc["dim"]))
    if kind == "lattice_box":
        return make_lattice_box(desc["lo"], desc["hi"])
    raise DomainError(f"unknown domain kind {kind!r}")


def continuum_cubes(desc: dict) -> list[DyadicCube]:
    """Continuum cubes behind a descriptor (a box of side N is the unit cube)."""
    if desc["kind"] == "box":
        return [DyadicCube(0, (0,) * int(desc["dim"]))]
    if desc["kind"] == "dyadic_union":
        return [_as_cube(c) for c in desc["cubes"]]
    raise DomainError("descriptor has no continuum counterpart")


def descriptor_resolution(desc: dict) -> int:
    return int(desc["side"] if desc["kind"] == "box" else desc["resolution"])


def boundary2(domain: LatticeDomain) -> np.ndarray:
    """Points of V^c at nearest-neighbour graph distance 1 or 2 from V."""
    d = domain.dim
    m = domain.mask
    grown = m.copy()
    for _ in range(2):
        g = grown.copy()
        for i in range(d):
            g[(slice(None),) * i + (slice(1, None),)] |= grown[(slice(None),) * i + (slice(None, -1),)]
            g[(slice(None),) * i + (slice(None, -1),)] |= grown[(slice(None),) * i + (slice(1, None),)]
        grown = g
    ring = grown & ~m
    pts = np.argwhere(ring) + domain.origin
    return pts[np.lexsort(pts.T[::-1])]


# ---------------------------------------------------------------------------
# precision operator


def _lap_valid(u: np.ndarray, d: int) -> np.ndarray:
    """Normalized Laplacian of the last d axes, keeping the valid interior."""
    lead = u.ndim - d
    core = (Ellipsis,) + tuple(slice(1, -1) for _ in range(d))
    out = u[core] * (-2.0 * d)
    for i in range(d):
        for s in (0, 2):
            idx = [slice(1, -1)] * d
            idx[i] = slice(s, u.shape[lead + i] - 2 + s)
            out += u[(Ellipsis,) + tuple(idx)]
    out *= 1.0 / (2 * d)
    return out


class PrecisionOperator:
    """Matrix-free bilaplacian quadratic form on a domain (zero outside).

    ``A(x, y)`` equals the Δ² stencil coefficient at offset ``y - x``.
    """

    def __init__(self, domain: LatticeDomain):
        self.domain = domain
        self.dim = domain.dim
        self.stencil = bilaplacian_stencil(domain.dim)
        self.diagonal_value = 1.0 + 1.0 / (2 * domain.dim)

    @property
    def n(self) -> int:
        return self.domain.size

    @property
    def shape(self) -> tuple:
        return (self.n, self.n)

    def apply(self, v: np.ndarray) -> np.ndarray:
        dom = self.domain
        u = dom.embed(v)
        # w lives on the unpadded bounding box
        w = _lap_valid(_lap_valid(u, self.dim), self.dim)
        lead = w.shape[: w.ndim - self.dim]
        if dom.single_box is not None:
            return w.reshape(lead + (dom.size,))
        return w[(Ellipsis,) + tuple((dom.points - dom.lo).T)]

    __matmul__ = apply

    def residual_inf(self, x: np.ndarray, b: np.ndarray) -> np.ndarray:
        r = self.apply(x) - b
        return np.abs(r).max(axis=-1)

    def apply_extended(self, v: np.ndarray) -> np.ndarray:
        """Δ²(v extended by zero), on the full padded bounding array."""
        u = self.domain.embed(v)
        w = _lap_valid(_lap_valid(u, self.dim), self.dim)
        pad = np.zeros(u.shape)
        pad[(Ellipsis,) + self.domain._inner] = w
        return pad

    @cached_property
    def sparse(self) -> sp.csr_matrix:
        dom = self.domain
        offs = self.stencil.offsets()
        coefs = self.stencil.coefficients()
        pts = dom.points
        rows, cols, vals = [], [], []
        shape = np.array(dom.array_shape)
        for o, c in zip(offs, coefs):
            nb = pts + o - dom.origin
            ok = np.all((nb >= 0) & (nb < shape), axis=1)
            j = np.full(len(pts), -1)
            j[ok] = dom.lookup[tuple(nb[ok].T)]
            sel = j >= 0
            rows.append(np.nonzero(sel)[0])
            cols.append(j[sel])
            vals.append(np.full(sel.sum(), c))
        A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=self.shape)
        return A.tocsr()

    def dense(self) -> np.ndarray:
        return self.sparse.toarray()

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """<f, g>_Δ = Σ_x Δf(x) Δg(x) over Z^d."""
        lf = _lap_valid(self.domain.embed(f), self.dim)
        lg = _lap_valid(self.domain.embed(g), self.dim)
        return float(np.sum(lf * lg))


def assemble_precision(domain: LatticeDomain) -> PrecisionOperator:
    return PrecisionOperator(domain)


# ---------------------------------------------------------------------------
# box hierarchy


@dataclass(frozen=True)
class BoxHierarchy:
    """Λ / n(x) / Δ^k(x) for a point x of a box D_N.

    Radius e^k enters through ⌊e^k⌋ (l∞ balls of integer radius).
    """

    center: tuple
    N: int
    n_x: int
    clearance: int
    dim: int = 4
    _radii: tuple = field(default=(), repr=False)

    def radius(self, k: int) -> int:
        return int(math.floor(math.exp(k)))

    def box(self, k: int) -> LatticeBox | None:
        """Δ^k(x): None for the empty set, the full D_N for k = n(x)."""
        if k < 0 or k > self.n_x:
            raise DomainError(f"level {k} outside [0, {self.n_x}]")
        if k == 0:
            return None
        if k == self.n_x:
            return LatticeBox((1,) * self.dim, (self.N - 1,) * self.dim)
        return self.ball(self.radius(k))

    def ball(self, r: int, clip: bool = True) -> LatticeBox:
        lo = tuple(c - r for c in self.center)
        hi = tuple(c + r for c in self.center)
        b = LatticeBox(lo, hi)
        if clip:
            b = b.intersect(LatticeBox((1,) * self.dim, (self.N - 1,) * self.dim))
        return b

    def level_box(self, k: int) -> LatticeBox:
        """Λ_{⌊e^k⌋}(x) ∩ D_N for any k >= 1, outside the n(x) bookkeeping."""
        return self.ball(self.radius(k))

    def is_full(self, k: int) -> bool:
        return k == self.n_x


def hierarchy(domain: LatticeDomain, x) -> BoxHierarchy:
    if domain.descriptor.get("kind") != "box":
        raise DomainError("box hierarchy needs a box domain")
    N = int(domain.descriptor["side"])
    x = tuple(int(c) for c in x)
    if not domain.contains(x):
        raise DomainError(f"{x} not in D_N")
    clearance = min(min(c - 1, N - 1 - c) for c in x)
    n = 0
    # n(x) = max{n >= 0 : ⌊e^{n+1}⌋ <= clearance}; 0 when the set is empty
    while math.floor(math.exp(n + 2)) <= clearance:
        n += 1
    return BoxHierarchy(x, N, n, clearance, domain.dim)
