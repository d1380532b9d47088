"""Numerical laboratory for the discrete membrane (bilaplacian) model in 4D."""

from .lattice import (
    DomainError, LatticeDomain, PrecisionOperator, assemble_precision,
    bilaplacian_stencil, boundary2, hierarchy, make_box, make_dyadic_union,
)
from .solvers import LinearSolver, SolverError

GAMMA = 8.0 / 3.141592653589793 ** 2

__version__ = "0.1.0"

__all__ = [
    "DomainError", "LatticeDomain", "PrecisionOperator", "assemble_precision",
    "bilaplacian_stencil", "boundary2", "hierarchy", "make_box", "make_dyadic_union",
    "LinearSolver", "SolverError", "GAMMA", "__version__",
]
