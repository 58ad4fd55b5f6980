"""Sparse direct solves through SuperLU.

SuperLU picks its own column ordering (COLAMD) unless the caller supplies a
symmetric permutation.  On structured grids a geometric nested-dissection
permutation (see :func:`fingerwave.grid_fem.nested_dissection`) roughly halves
the fill of the coupled pressure/saturation Jacobian; in that case the matrix
is pre-permuted and factored with the natural ordering and a relaxed pivot
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid_fem import LinearSystem


class SolverError(RuntimeError):
    """Factorization or solve failed.  ``residual`` holds the best relative residual seen."""

    def __init__(self, message: str, residual: float = float("inf")):
        super().__init__(f"{message} (relative residual {residual:.3g})")
        self.residual = residual


@dataclass(frozen=True)
class SolveReport:
    relative_residual: float
    iterations: int = 0
    reused_factorization: bool = False


class Factorization:
    """LU factors of a square sparse matrix, reusable for many right-hand sides.

    Parameters
    ----------
    matrix : sparse matrix
        Square, nonsingular.
    perm : array of int, optional
        Symmetric permutation applied before factoring.  ``perm[k]`` is the
        original index placed at position ``k``.
    pivot_threshold : float
        SuperLU ``diag_pivot_thresh``; only used together with ``perm``.
    """

    def __init__(self, matrix, perm: np.ndarray | None = None, pivot_threshold: float = 0.1):
        A = sp.csc_matrix(matrix)
        if A.shape[0] != A.shape[1]:
            raise SolverError(f"matrix is not square: {A.shape}")
        self.matrix = A
        self.perm = None if perm is None else np.asarray(perm, dtype=np.int64)
        try:
            if self.perm is None:
                self._lu = splu(A)
            else:
                Ap = A[self.perm][:, self.perm].tocsc()
                self._lu = splu(Ap, permc_spec="NATURAL", diag_pivot_thresh=pivot_threshold)
        except RuntimeError as exc:  # SuperLU reports exact singularity this way
            raise SolverError(f"factorization failed: {exc}") from exc
        self.n_solves = 0

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def fill(self) -> int:
        return int(self._lu.L.nnz + self._lu.U.nnz)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.perm is None:
            x = self._lu.solve(b)
        else:
            x = np.empty_like(b)
            x[self.perm] = self._lu.solve(b[self.perm])
        self.n_solves += 1
        return x


def relative_residual(A, x: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return float(r / nb) if nb > 0 else float(r)


def solve_matrix(A, b, rtol: float = 1e-10, factorization: Factorization | None = None,
                 perm: np.ndarray | None = None) -> tuple[np.ndarray, SolveReport]:
    """Solve ``A x = b`` directly, checking the achieved relative residual.

    A supplied ``factorization`` is trusted to belong to ``A``; the residual
    check still uses ``A`` itself, so a stale factorization is caught.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    reused = factorization is not None
    lu = factorization if reused else Factorization(A, perm=perm)
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values")
    rel = relative_residual(A, x, b)
    if rel > rtol:
        # one step of iterative refinement usually recovers a few digits
        x = x + lu.solve(b - A @ x)
        rel = relative_residual(A, x, b)
        if rel > rtol:
            raise SolverError("direct solve missed the requested tolerance", rel)
    return x, SolveReport(rel, 0, reused)


def solve(system: LinearSystem, rtol: float = 1e-10,
          factorization: Factorization | None = None) -> tuple[np.ndarray, SolveReport]:
    """Solve a reduced :class:`~fingerwave.grid_fem.LinearSystem`.

    Returns the reduced solution vector; use ``system.expand`` for nodal values.
    """
    return solve_matrix(system.matrix, system.rhs, rtol=rtol, factorization=factorization)
