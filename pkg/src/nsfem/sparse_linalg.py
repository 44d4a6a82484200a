"""Direct sparse solves, dense symmetric generalized eigenproblems, and
discretely divergence-free bases.

Sparse LU is SuperLU through scipy; the eigen reduction is done here
explicitly (Cholesky of the mass-like matrix, then a symmetric eigensolve).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DEFAULT_DENSE_CAP = 3000
DENSE_CAP_ENV = "NSFEM_DENSE_CAP"


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class DenseCapExceeded(ValueError):
    pass


def dense_cap() -> int:
    value = os.environ.get(DENSE_CAP_ENV)
    if value is None:
        return DEFAULT_DENSE_CAP
    try:
        cap = int(value)
    except ValueError:
        raise ValueError(f"{DENSE_CAP_ENV} must be an integer, got {value!r}") from None
    if cap <= 0:
        raise ValueError(f"{DENSE_CAP_ENV} must be positive, got {cap}")
    return cap


def check_cap(n: int, what: str, cap=None) -> None:
    cap = dense_cap() if cap is None else cap
    if n > cap:
        raise DenseCapExceeded(
            f"{what} has {n} unknowns, above the dense cap of {cap}; use a coarser mesh "
            f"or raise {DENSE_CAP_ENV}")


def _locate_zero_pivot(A):
    A = sp.csr_matrix(A)
    empty_rows = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty_rows):
        return int(empty_rows[0]), "row"
    empty_cols = np.setdiff1d(np.arange(A.shape[1]), A.indices)
    if len(empty_cols):
        return int(empty_cols[0]), "column"
    if A.shape[0] <= 4 * DEFAULT_DENSE_CAP:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            lu, _ = sla.lu_factor(A.toarray(), check_finite=False)
        d = np.abs(np.diag(lu))
        small = np.flatnonzero(d <= np.finfo(float).eps * max(d.max(), 1.0) * A.shape[0])
        if len(small):
            return int(small[0]), "pivot"
    return None, "pivot"


class Factorization:
    """LU factors of a square sparse matrix.

    Partial (row) pivoting with a minimum-degree ordering on A^T + A, which
    suits the structurally symmetric saddle blocks assembled here.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got shape {A.shape}")
        if A.nnz and not np.all(np.isfinite(A.data)):
            raise ValueError("matrix contains non-finite entries")
        self.shape = A.shape
        self.norm1 = float(spla.norm(A, 1)) if A.nnz else 0.0
        try:
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            idx, kind = _locate_zero_pivot(A)
            where = f" at {kind} {idx}" if idx is not None else ""
            raise SingularMatrixError(f"matrix is numerically singular{where}: {exc}", idx) from None
        udiag = np.abs(self._lu.U.diagonal())
        tol = np.finfo(float).eps * max(self.norm1, 1.0) * 10
        small = np.flatnonzero(udiag <= tol)
        if len(small):
            col = int(np.flatnonzero(self._lu.perm_c == small[0])[0])
            raise SingularMatrixError(
                f"matrix is numerically singular: pivot {int(small[0])} (column {col}) "
                f"has magnitude {udiag[small[0]]:.3e}", col)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.shape[0]:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.shape[0]}")
        return self._lu.solve(b)


def factorize(A) -> Factorization:
    return Factorization(A)


def solve(F: Factorization, b):
    return F.solve(b)


@dataclass
class EigenResult:
    eigenvalues: np.ndarray   # ascending
    eigenvectors: np.ndarray  # M-orthonormal columns
    problem: str = "S v = lambda M v"


def _dense(X):
    return X.toarray() if sp.issparse(X) else np.asarray(X, dtype=float)


def sym_generalized_eigs(S, M=None, k=None, which="smallest", cap=None) -> EigenResult:
    """Eigenpairs of the symmetric pencil (S, M) with M symmetric positive definite.

    Reduces to ``L^-1 S L^-T`` with ``M = L L^T`` and solves the standard
    symmetric problem densely.  ``k=None`` returns every pair.
    """
    S = _dense(S)
    n = S.shape[0]
    M = np.eye(n) if M is None else _dense(M)
    if S.shape != (n, n) or M.shape != (n, n):
        raise ValueError("S and M must be square and of equal size")
    check_cap(n, "eigenproblem", cap)
    scale = max(np.abs(S).max(), 1e-300)
    if np.abs(S - S.T).max() > 1e-12 * scale:
        raise ValueError("S is not symmetric")
    mscale = max(np.abs(M).max(), 1e-300)
    if np.abs(M - M.T).max() > 1e-12 * mscale:
        raise ValueError("M is not symmetric")
    S = 0.5 * (S + S.T)
    M = 0.5 * (M + M.T)
    try:
        L = sla.cholesky(M, lower=True)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("M is not positive definite") from None
    C = sla.solve_triangular(L, sla.solve_triangular(L, S, lower=True).T, lower=True)
    C = 0.5 * (C + C.T)
    if k is None:
        k = n
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    if which == "smallest":
        lo, hi = 0, k - 1
    elif which == "largest":
        lo, hi = n - k, n - 1
    else:
        raise ValueError(f"which must be 'smallest' or 'largest', got {which!r}")
    w, Y = sla.eigh(C, subset_by_index=[lo, hi])
    V = sla.solve_triangular(L.T, Y, lower=False)
    return EigenResult(w, V)


def nullspace_basis(B, free_dofs, rank_tol=1e-10, cap=None) -> np.ndarray:
    """Orthonormal basis of ``{v : B v = 0, v = 0 off free_dofs}``.

    Returns an (n_vel, dim) array; rows outside `free_dofs` are zero.
    """
    free_dofs = np.asarray(free_dofs)
    check_cap(len(free_dofs), "divergence-free basis", cap)
    Bf = _dense(sp.csr_matrix(B)[:, free_dofs])
    _, s, Vt = sla.svd(Bf, full_matrices=True)
    rank = int(np.sum(s > rank_tol * s.max())) if len(s) else 0
    Z = np.zeros((B.shape[1], len(free_dofs) - rank))
    Z[free_dofs] = Vt[rank:].T
    return Z
