"""Sparse CSR products, conjugate gradients and LU solves.

Matrices are ``scipy.sparse.csr_matrix``; the solvers here add the convergence
and singularity contracts the FEM code relies on.
"""
import logging
import warnings

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

SparseMatrix = sp.csr_matrix

log = logging.getLogger(__name__)

CG_TOL = 1e-10


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message, residual, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = history or []


class SingularMatrixError(SolverError):
    pass


def csr(data, indices, indptr, shape):
    return sp.csr_matrix((data, indices, indptr), shape=shape)


def spmv(A, x, transpose=False):
    x = np.asarray(x, dtype=float)
    n_rows, n_cols = A.shape
    if transpose:
        n_rows, n_cols = n_cols, n_rows
    if x.shape[0] != n_cols:
        raise ValueError(f"dimension mismatch: {A.shape}{'^T' if transpose else ''} times {x.shape[0]}")
    return A.T @ x if transpose else A @ x


def cg_solve(A, b, tol=CG_TOL, max_iter=None, x0=None, jacobi=False):
    """Conjugate gradients for SPD ``A``; stops when ||Ax - b|| <= tol * ||b||."""
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"dimension mismatch: {A.shape} vs rhs {n}")
    if max_iter is None:
        max_iter = 10 * n
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    if jacobi:
        d = A.diagonal()
        if np.any(d <= 0):
            raise ConvergenceError("Jacobi preconditioner needs a positive diagonal", np.linalg.norm(r))
        dinv = 1.0 / d
    else:
        dinv = None
    z = r * dinv if jacobi else r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    rnorm = np.linalg.norm(r)
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
        for _ in range(max_iter):
            if rnorm <= target:
                break
            q = A @ p
            pq = p @ q
            if not pq > 0:
                raise ConvergenceError(f"matrix is not positive definite (p.Ap = {pq:.3g})", rnorm)
            alpha = rz / pq
            x += alpha * p
            r -= alpha * q
            rnorm = np.linalg.norm(r)
            if not np.isfinite(rnorm):
                raise ConvergenceError("CG diverged (non-finite residual); is the matrix SPD?", rnorm)
            z = r * dinv if jacobi else r
            rz_new = r @ z
            p = z + (rz_new / rz) * p
            rz = rz_new
    # recompute the true residual: the recurrence drifts on ill-conditioned systems
    rnorm = np.linalg.norm(b - A @ x)
    if not rnorm <= target:
        raise ConvergenceError(f"CG did not converge in {max_iter} iterations "
                               f"(relative residual {rnorm / bnorm:.3e})", rnorm)
    return x


def lu_solve(A, b):
    """Solve ``A x = b`` by LU with partial pivoting.

    Dense input uses LAPACK ``getrf``; sparse input is factorised with SuperLU so
    that large nonsymmetric Newton systems stay affordable.
    """
    b = np.asarray(b, dtype=float)
    if sp.issparse(A):
        n = A.shape[0]
        if A.shape != (n, n) or b.shape[0] != n:
            raise ValueError("lu_solve needs a square system")
        try:
            lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SingularMatrixError(str(exc)) from exc
        udiag = np.abs(lu.U.diagonal())
        if udiag.min() <= n * np.finfo(float).eps * max(udiag.max(), 1e-300):
            raise SingularMatrixError("matrix is singular to working precision")
        return lu.solve(b)
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.ndim != 2 or A.shape != (n, n) or b.shape[0] != n:
        raise ValueError("lu_solve needs a square system")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(A, check_finite=True)
    udiag = np.abs(np.diag(lu))
    anorm = np.abs(A).sum(axis=1).max()
    if udiag.min() <= n * np.finfo(float).eps * anorm:
        raise SingularMatrixError("matrix is singular to working precision")
    return sla.lu_solve((lu, piv), b)


def spd_solve(A, b, tol=CG_TOL):
    """Jacobi-preconditioned CG, falling back to a sparse LU solve when CG stalls.

    Strongly graded meshes push the stiffness condition number high enough that
    tight CG tolerances sit at the rounding floor.
    """
    try:
        return cg_solve(A, b, tol=tol, jacobi=True)
    except ConvergenceError as exc:
        log.debug("CG fallback to LU: %s", exc)
        return lu_solve(sp.csr_matrix(A), b)
