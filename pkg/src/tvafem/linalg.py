"""Sparse matrices in CSR form and a preconditioned conjugate gradient solver.

The CSR storage is plain numpy arrays. Products are delegated to
``scipy.sparse`` for speed; the CG iteration itself is written out here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver exhausts its iteration budget.

    Attributes
    ----------
    residual : float
        Euclidean norm of the final residual.
    iterations : int
        Number of iterations performed.
    """

    def __init__(self, message, residual, iterations):
        super().__init__(message)
        self.residual = float(residual)
        self.iterations = int(iterations)


class SparseMatrix:
    """Immutable CSR matrix.

    Parameters
    ----------
    n_rows, n_cols : int
        Shape.
    row_offsets : ndarray of int, shape (n_rows + 1,)
    col_indices : ndarray of int
        Strictly increasing within each row.
    values : ndarray of float
    """

    __slots__ = ("n_rows", "n_cols", "row_offsets", "col_indices", "values", "_csr")

    def __init__(self, n_rows, n_cols, row_offsets, col_indices, values):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=float)
        for a in (self.row_offsets, self.col_indices, self.values):
            a.setflags(write=False)
        self._csr = sps.csr_matrix(
            (self.values, self.col_indices, self.row_offsets),
            shape=(self.n_rows, self.n_cols),
        )

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return int(self.values.size)

    def to_scipy(self) -> sps.csr_matrix:
        """Return a scipy CSR view (shares the value buffers)."""
        return self._csr

    @classmethod
    def from_scipy(cls, A) -> "SparseMatrix":
        A = sps.csr_matrix(A)
        A.sum_duplicates()
        A.sort_indices()
        return cls(A.shape[0], A.shape[1], A.indptr, A.indices, A.data)

    def toarray(self):
        return self._csr.toarray()

    def diagonal(self):
        return self._csr.diagonal()

    def __matmul__(self, x):
        return spmv(self, x)

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


def csr_from_triplets(n_rows, n_cols, triplets=None, *, rows=None, cols=None, vals=None):
    """Build a CSR matrix from (row, col, value) triplets, summing duplicates.

    Either pass ``triplets`` as an iterable of 3-tuples or the three
    parallel arrays ``rows``, ``cols``, ``vals``.

    Raises
    ------
    IndexError
        If any index is outside the matrix shape.
    """
    if triplets is not None:
        t = list(triplets)
        if t:
            rows, cols, vals = (np.asarray(c) for c in zip(*t))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if not (rows.size == cols.size == vals.size):
        raise ValueError("triplet arrays differ in length")
    if rows.size:
        if rows.min() < 0 or rows.max() >= n_rows:
            raise IndexError(f"row index out of range [0, {n_rows})")
        if cols.min() < 0 or cols.max() >= n_cols:
            raise IndexError(f"column index out of range [0, {n_cols})")
    A = sps.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    return SparseMatrix.from_scipy(A)


def identity(n) -> SparseMatrix:
    return SparseMatrix.from_scipy(sps.identity(n, format="csr"))


def diagonal_matrix(d) -> SparseMatrix:
    return SparseMatrix.from_scipy(sps.diags(np.asarray(d, dtype=float), format="csr"))


def spmv(A: SparseMatrix, x):
    """Return ``A @ x``.

    Raises
    ------
    ValueError
        On dimension mismatch.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] != A.n_cols:
        raise ValueError(f"dimension mismatch: matrix has {A.n_cols} columns, vector {x.shape[0]}")
    return A.to_scipy() @ x


@dataclass
class CgConfig:
    """Settings for :func:`cg_solve`.

    ``max_iterations=None`` means ten times the system size.
    """

    rel_tolerance: float = 1e-12
    max_iterations: int | None = None
    preconditioner: str = "jacobi"

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ValueError("rel_tolerance must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.preconditioner not in ("none", "jacobi"):
            raise ValueError("preconditioner must be 'none' or 'jacobi'")


def cg_solve(A, b, cfg: CgConfig | None = None, x0=None, precond=None):
    """Solve the SPD system ``A x = b`` by preconditioned conjugate gradients.

    Parameters
    ----------
    A : SparseMatrix or scipy sparse matrix
    b : array_like
    cfg : CgConfig, optional
    x0 : array_like, optional
        Initial guess (zero by default).
    precond : callable, optional
        Maps a residual to the preconditioned residual; overrides
        ``cfg.preconditioner``.

    Returns
    -------
    x : ndarray
    iterations : int
    residual : float
        Euclidean norm of ``b - A x`` (recomputed explicitly at exit).

    Raises
    ------
    ConvergenceError
        If ``||A x - b|| <= rel_tolerance ||b||`` is not reached.
    """
    cfg = cfg or CgConfig()
    M = A.to_scipy() if isinstance(A, SparseMatrix) else sps.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if M.shape != (n, n):
        raise ValueError(f"dimension mismatch: matrix {M.shape}, rhs {n}")
    maxit = cfg.max_iterations if cfg.max_iterations is not None else max(10 * n, 1)
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    tol = cfg.rel_tolerance * bnorm
    if precond is not None:
        dinv = None
    elif cfg.preconditioner == "jacobi":
        dinv = M.diagonal().copy()
        if np.any(dinv <= 0):
            raise ValueError("Jacobi preconditioner needs a positive diagonal")
        dinv = 1.0 / dinv
    else:
        dinv = None

    r = b - M @ x
    rnorm = np.linalg.norm(r)
    if rnorm <= tol:
        return x, 0, rnorm
    apply = precond or ((lambda v: v * dinv) if dinv is not None else (lambda v: v))
    zv = apply(r)
    p = zv.copy()
    rz = r @ zv
    it = 0
    while it < maxit:
        it += 1
        Ap = M @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise ConvergenceError("matrix is not positive definite", rnorm, it)
        a = rz / pAp
        x += a * p
        r -= a * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= tol:
            # guard against drift of the recursive residual
            rtrue = np.linalg.norm(b - M @ x)
            if rtrue <= tol:
                return x, it, rtrue
            r = b - M @ x
        zv = apply(r)
        rz_new = r @ zv
        p = zv + (rz_new / rz) * p
        rz = rz_new
    rnorm = np.linalg.norm(b - M @ x)
    raise ConvergenceError(
        f"CG did not converge in {maxit} iterations (residual {rnorm:.3e}, target {tol:.3e})",
        rnorm,
        it,
    )
