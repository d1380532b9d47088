"""Linear solvers for the precision operator.

Two routes share one residual contract (‖A x − b‖∞ ≤ tol per right-hand side):

* dense Cholesky of the assembled matrix, for small domains;
* batched preconditioned conjugate gradients, matrix-free.

The preconditioner inverts the square of the Dirichlet Laplacian on every
box of the domain's box partition with a type-I sine transform.  On a box the
precision matrix is that square plus a diagonal boundary term, so PCG
converges in a handful of iterations independent of N.
"""

from __future__ import annotations

import os
from collections import defaultdict

import numpy as np
import scipy.linalg as la
from scipy.fft import dstn

from .lattice import LatticeDomain, PrecisionOperator

DEFAULT_MAX_DENSE = 7000
DENSE_TOL = 1e-10
ITERATIVE_TOL = 1e-8


class SolverError(RuntimeError):
    """Iterative solve failed to reach its residual tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


def max_dense_default() -> int:
    return int(os.environ.get("MEMBRANE_LAB_MAX_DENSE", DEFAULT_MAX_DENSE))


def box_partition(domain: LatticeDomain):
    if domain.boxes is not None:
        return domain.boxes
    if domain.single_box is not None:
        return (domain.single_box,)
    return None


class BoxPreconditioner:
    """Block inverse of L_box² over the box partition; Jacobi elsewhere."""

    def __init__(self, op: PrecisionOperator):
        dom = op.domain
        d = dom.dim
        self.n = dom.size
        self.groups = []
        covered = np.zeros(self.n, dtype=bool)
        boxes = box_partition(dom)
        if boxes:
            by_shape = defaultdict(list)
            for b in boxes:
                by_shape[b.shape].append(b)
            for shape, bs in by_shape.items():
                idx = np.stack([dom.indices_of(b.points()).reshape(shape) for b in bs])
                covered[idx.ravel()] = True
                cos = [np.cos(np.pi * np.arange(1, m + 1) / (m + 1)) for m in shape]
                mu = sum(np.meshgrid(*cos, indexing="ij")) / d - 1.0
                self.groups.append((idx, 1.0 / mu**2, d))
        self.jacobi = np.nonzero(~covered)[0]
        self.jacobi_scale = 1.0 / op.diagonal_value
        self.single = (len(self.groups) == 1 and self.groups[0][0].shape[0] == 1
                       and len(self.jacobi) == 0 and dom.single_box is not None)

    def __call__(self, r: np.ndarray) -> np.ndarray:
        lead = r.shape[:-1]
        if self.single:
            idx, inv, d = self.groups[0]
            x = r.reshape(lead + inv.shape)
            axes = tuple(range(x.ndim - d, x.ndim))
            y = dstn(dstn(x, type=1, norm="ortho", axes=axes) * inv,
                     type=1, norm="ortho", axes=axes)
            return y.reshape(lead + (self.n,))
        out = np.empty_like(r)
        for idx, inv, d in self.groups:
            x = r[..., idx]
            axes = tuple(range(x.ndim - d, x.ndim))
            y = dstn(dstn(x, type=1, norm="ortho", axes=axes) * inv,
                     type=1, norm="ortho", axes=axes)
            out[..., idx] = y
        if len(self.jacobi):
            out[..., self.jacobi] = r[..., self.jacobi] * self.jacobi_scale
        return out


def pcg(op: PrecisionOperator, b: np.ndarray, tol: float = ITERATIVE_TOL,
        maxiter: int = 2000, precond=None, x0=None):
    """Batched PCG: each row of ``b`` is an independent right-hand side.

    Returns (x, residual_inf, iterations).  Convergence is judged on the true
    residual, recomputed before returning.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    M = precond or BoxPreconditioner(op)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - op.apply(x) if x0 is not None else b.copy()
    res = np.abs(r).max(axis=1)
    it = 0
    active = res > tol
    while np.any(active) and it < maxiter:
        ia = np.nonzero(active)[0]
        ra = r[ia]
        z = M(ra)
        p = z.copy()
        rz = np.einsum("ij,ij->i", ra, z)
        xa = x[ia]
        inner = 0
        while inner < maxiter - it:
            Ap = op.apply(p)
            pAp = np.einsum("ij,ij->i", p, Ap)
            alpha = rz / pAp
            xa += alpha[:, None] * p
            ra -= alpha[:, None] * Ap
            it += 1
            inner += 1
            rres = np.abs(ra).max(axis=1)
            if np.all(rres <= 0.5 * tol):
                break
            z = M(ra)
            rz_new = np.einsum("ij,ij->i", ra, z)
            beta = rz_new / rz
            rz = rz_new
            p = z + beta[:, None] * p
        x[ia] = xa
        # true residual guards against drift of the recursive one
        r[ia] = b[ia] - op.apply(xa)
        res[ia] = np.abs(r[ia]).max(axis=1)
        active = res > tol
    if np.any(active):
        raise SolverError("PCG did not converge", float(res.max()), it)
    return x, res, it


class LinearSolver:
    """Solves A x = b on one domain with either route."""

    def __init__(self, op: PrecisionOperator, method: str = "auto",
                 tol: float | None = None, max_dense: int | None = None):
        self.op = op
        max_dense = max_dense_default() if max_dense is None else max_dense
        if method == "auto":
            method = "dense" if op.n <= max_dense else "iterative"
        if method not in ("dense", "iterative"):
            raise ValueError(f"unknown solver method {method!r}")
        self.method = method
        self.tol = tol if tol is not None else (DENSE_TOL if method == "dense" else ITERATIVE_TOL)
        self._chol = None
        self._precond = None
        self.last_iterations = 0

    @property
    def cholesky(self):
        if self._chol is None:
            self._chol = la.cho_factor(self.op.dense(), lower=False)
        return self._chol

    @property
    def precond(self):
        if self._precond is None:
            self._precond = BoxPreconditioner(self.op)
        return self._precond

    def solve(self, b: np.ndarray, tol: float | None = None,
              batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
        """Returns (x, residual_inf) with the same leading shape as ``b``."""
        tol = self.tol if tol is None else tol
        b = np.asarray(b, dtype=float)
        single = b.ndim == 1
        B = np.atleast_2d(b)
        if self.method == "dense":
            X = la.cho_solve(self.cholesky, B.T).T
            res = self.op.residual_inf(X, B)
            if np.any(res > tol):
                # one step of iterative refinement
                X = X + la.cho_solve(self.cholesky, (B - self.op.apply(X)).T).T
                res = self.op.residual_inf(X, B)
            if np.any(res > tol):
                raise SolverError("dense solve missed tolerance", float(res.max()), 0)
        else:
            X = np.empty_like(B)
            res = np.empty(len(B))
            for s in range(0, len(B), batch):
                X[s:s + batch], res[s:s + batch], it = pcg(
                    self.op, B[s:s + batch], tol=tol, precond=self.precond)
                self.last_iterations = it
        if single:
            return X[0], res[0]
        return X, res

    def inverse_dense(self) -> np.ndarray:
        """Full A^{-1} (dense route only)."""
        if self.method != "dense":
            raise ValueError("full inverse only available on the dense route")
        return la.cho_solve(self.cholesky, np.eye(self.op.n))
