"""Sparse linear algebra: constrained systems, direct and iterative solves.

The direct solver is SuperLU (sparse LU with partial pivoting and a
fill-reducing column ordering) via scipy; a diagonally preconditioned
conjugate-gradient fallback is available for the symmetric systems.
Constraint condensation follows the classic eliminate-and-distribute
pattern: the condensed operator keeps the full DoF numbering, carries the
reduced operator on the unconstrained block and a unit diagonal on
constrained rows/columns; after solving, constrained values are restored
from their masters (hanging nodes) or boundary data (Dirichlet).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import ConstraintSet


class LinAlgError(RuntimeError):
    """Raised for singular systems and failed iterative solves."""


class Factorization:
    """Reusable LU factorization handle for repeated solves."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise LinAlgError(f"matrix is not square: {A.shape}")
        empty = np.nonzero(np.diff(A.indptr) == 0)[0]
        if len(empty):
            raise LinAlgError(f"singular matrix: column {empty[0]} is zero")
        csr = A.tocsr()
        empty = np.nonzero(np.diff(csr.indptr) == 0)[0]
        if len(empty):
            raise LinAlgError(f"singular matrix: row {empty[0]} is zero")
        self.shape = A.shape
        try:
            self._lu = spla.splu(A)
        except RuntimeError as exc:  # SuperLU signals singular factors this way
            raise LinAlgError(f"LU factorization failed: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        x = self._lu.solve(np.asarray(b, dtype=float))
        if not np.all(np.isfinite(x)):
            raise LinAlgError("solve produced non-finite values "
                              "(matrix numerically singular)")
        return x


def factor_solve(A, b: np.ndarray) -> np.ndarray:
    """Direct sparse solve ``A x = b`` (LU with partial pivoting)."""
    return Factorization(A).solve(b)


def solve_cg(A, b, tol: float = 1e-12, maxiter: int | None = None,
             precondition: bool = True) -> np.ndarray:
    """Conjugate gradients with (optional) diagonal preconditioning."""
    A = sp.csr_matrix(A)
    d = A.diagonal()
    if precondition:
        if np.any(d <= 0):
            raise LinAlgError("diagonal preconditioner needs positive diagonal")
        M = sp.diags(1.0 / d)
    else:
        M = None
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M)
    if info != 0:
        raise LinAlgError(f"CG did not converge (info={info})")
    return x


def block_matrix(blocks) -> sp.csr_matrix:
    """Assemble a block sparse matrix (None entries are zero blocks)."""
    return sp.bmat(blocks, format="csr")


def condense(A, b, constraints: ConstraintSet, g_full=None):
    """Reduced system on the unconstrained DoFs.

    Returns ``(A_red, b_red)`` with ``A_red = P^T A P`` and
    ``b_red = P^T (b - A g)`` where ``g`` is the constraint inhomogeneity.
    """
    P = constraints.P
    A = sp.csr_matrix(A)
    A_red = (P.T @ A @ P).tocsr()
    if g_full is None:
        b_red = P.T @ b
    else:
        b_red = P.T @ (b - A @ g_full)
    return A_red, b_red


class LinearSystem:
    """A sparse system together with its constraints.

    ``condense()`` produces the full-size condensed system (unit diagonal on
    constrained rows/columns, symmetric elimination); it is idempotent.
    ``solve()`` solves and redistributes so every constraint holds exactly.
    """

    def __init__(self, A, b, constraints: ConstraintSet,
                 dirichlet_values=None, _condensed: bool = False):
        self.A = sp.csr_matrix(A)
        self.b = np.asarray(b, dtype=float)
        self.constraints = constraints
        if self.A.shape != (constraints.n, constraints.n):
            raise LinAlgError("system size does not match the constraint set")
        self.g_full = (constraints.lift(dirichlet_values)
                       if dirichlet_values is not None else None)
        self._dirichlet_values = dirichlet_values
        self._condensed = _condensed

    def condense(self) -> "LinearSystem":
        if self._condensed:
            return self
        cons = self.constraints
        A_red, b_red = condense(self.A, self.b, cons, self.g_full)
        n = cons.n
        free = cons.free_dofs
        S = sp.csr_matrix(
            (np.ones(len(free)), (free, np.arange(len(free)))),
            shape=(n, len(free)),
        )
        mask = np.ones(n)
        mask[free] = 0.0
        A_c = (S @ A_red @ S.T + sp.diags(mask)).tocsr()
        b_c = S @ b_red
        out = LinearSystem(A_c, b_c, cons,
                           dirichlet_values=self._dirichlet_values,
                           _condensed=True)
        return out

    def solve(self) -> np.ndarray:
        sysc = self.condense()
        x = factor_solve(sysc.A, sysc.b)
        return self.constraints.distribute(x, self.g_full)
