"""Solvers for regularized Laplacian systems (L + cI) X = B."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from .logger import logger

DEFAULT_CG_TOL = 1e-10
DEFAULT_DENSE_CAP = 2000
DEFAULT_CD_MAX_EPOCHS = 10000


@dataclass
class RegularizedSystem:
    """The n column systems (L + cI) x_j = b_j sharing one Laplacian.

    Attributes:
        L: Sparse K x K Laplacian
        c: Positive diagonal shift (2 / lambda inside ADMM)
        B: K x n right-hand-side block
        X0: K x n warm start, zeros when None
    """

    L: sp.spmatrix
    c: float
    B: np.ndarray
    X0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"shift c must be positive, got {self.c}")
        self.L = sp.csr_matrix(self.L)
        K = self.L.shape[0]
        B = np.asarray(self.B, dtype=float)
        self.B = B.reshape(K, -1)
        if self.X0 is None:
            self.X0 = np.zeros_like(self.B)
        else:
            self.X0 = np.asarray(self.X0, dtype=float).reshape(self.B.shape)

    @property
    def K(self) -> int:
        return self.L.shape[0]

    def matrix(self) -> sp.csr_matrix:
        """The coefficient matrix L + cI."""
        return (self.L + self.c * sp.identity(self.K, format='csr')).tocsr()

    def residual_norms(self, X: np.ndarray) -> np.ndarray:
        """Column-wise ||(L + cI) x_j - b_j||_2."""
        X = np.asarray(X, dtype=float).reshape(self.B.shape)
        return np.linalg.norm(self.L @ X + self.c * X - self.B, axis=0)


@dataclass
class LinearSolveResult:
    """Solution block plus convergence diagnostics."""

    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def _thresholds(B: np.ndarray, tol: float) -> np.ndarray:
    return tol * np.maximum(1.0, np.linalg.norm(B, axis=0))


def solve_cg(system: RegularizedSystem, tol: float = DEFAULT_CG_TOL,
             max_iter: Optional[int] = None,
             executor: Optional[ThreadPoolExecutor] = None) -> LinearSolveResult:
    """Jacobi-preconditioned conjugate gradient, one run per column.

    Column j stops once ||(L + cI) x_j - b_j|| <= tol * max(1, ||b_j||).

    Args:
        system: The regularized system with warm start X0
        tol: Relative residual tolerance
        max_iter: CG iteration cap per column (default 10 K)
        executor: Optional pool used to solve the columns concurrently

    Returns:
        LinearSolveResult; converged is False when some column hit max_iter,
        with residual the worst achieved relative residual
    """
    A = system.matrix()
    K, n = system.B.shape
    if max_iter is None:
        max_iter = 10 * K
    M = sp.diags(1.0 / A.diagonal())
    limits = _thresholds(system.B, tol)

    def solve_column(j: int):
        count = [0]

        def callback(_xk):
            count[0] += 1

        b = system.B[:, j]
        x0 = system.X0[:, j]
        if np.linalg.norm(A @ x0 - b) <= limits[j]:
            return x0.copy(), 0
        x, _info = scipy.sparse.linalg.cg(A, b, x0=x0, rtol=tol, atol=limits[j],
                                          maxiter=max_iter, M=M, callback=callback)
        return x, count[0]

    if executor is not None and n > 1:
        outcomes = list(executor.map(solve_column, range(n)))
    else:
        outcomes = [solve_column(j) for j in range(n)]

    X = np.column_stack([x for x, _ in outcomes]) if n else np.zeros((K, 0))
    iterations = max((it for _, it in outcomes), default=0)
    norms = system.residual_norms(X)
    relative = norms / np.maximum(1.0, np.linalg.norm(system.B, axis=0))
    worst = float(relative.max()) if n else 0.0
    converged = bool(np.all(norms <= limits * (1 + 1e-8)))
    if not converged:
        logger.debug(f"CG stopped after {iterations} iterations with relative residual {worst:.3e}")
    return LinearSolveResult(X, iterations, worst, converged)


def solve_cd(L: sp.spmatrix, c: float, b: np.ndarray, seed: int = 0,
             tol: float = 1e-10, max_epochs: int = DEFAULT_CD_MAX_EPOCHS,
             x0: Optional[np.ndarray] = None) -> LinearSolveResult:
    """Randomized coordinate descent on (L + cI) x = b.

    Each epoch visits every row once in a seeded random order; visiting row
    i sets x_i = (b_i - sum_{j != i} a_ij x_j) / a_ii, which minimizes the
    quadratic (1/2) x^T A x - b^T x over x_i exactly.

    Args:
        L: Sparse Laplacian
        c: Positive shift
        b: Right-hand side (length K)
        seed: Seed of the permutation stream
        tol: Relative residual tolerance, checked after each epoch
        max_epochs: Epoch cap
        x0: Optional starting point

    Returns:
        LinearSolveResult with iterations counted in epochs
    """
    if not c > 0:
        raise ValueError(f"shift c must be positive, got {c}")
    L = sp.csr_matrix(L)
    L.sort_indices()
    K = L.shape[0]
    b = np.asarray(b, dtype=float).ravel()
    x = np.zeros(K) if x0 is None else np.array(x0, dtype=float).ravel()
    diag = L.diagonal() + c
    indptr, indices, data = L.indptr, L.indices, L.data
    limit = tol * max(1.0, float(np.linalg.norm(b)))
    rng = np.random.default_rng(seed)

    def residual() -> float:
        return float(np.linalg.norm(L @ x + c * x - b))

    res = residual()
    epochs = 0
    while res > limit and epochs < max_epochs:
        for i in rng.permutation(K):
            start, end = indptr[i], indptr[i + 1]
            row_dot = data[start:end] @ x[indices[start:end]]
            # row_dot includes L_ii x_i; add it back to get the off-diagonal sum
            off = row_dot - (diag[i] - c) * x[i]
            x[i] = (b[i] - off) / diag[i]
        epochs += 1
        res = residual()

    converged = res <= limit
    if not converged:
        logger.debug(f"coordinate descent stopped after {epochs} epochs with residual {res:.3e}")
    return LinearSolveResult(x, epochs, res / max(1.0, float(np.linalg.norm(b))), converged)


def solve_dense(L: sp.spmatrix, c: float, B: np.ndarray,
                max_dim: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Direct Cholesky solve of (L + cI) X = B.

    Raises:
        ValueError: If K exceeds max_dim or c is not positive
    """
    if not c > 0:
        raise ValueError(f"shift c must be positive, got {c}")
    K = L.shape[0]
    if K > max_dim:
        raise ValueError(f"dense solve refused for K={K} (cap {max_dim})")
    A = sp.csr_matrix(L).toarray() + c * np.eye(K)
    B = np.asarray(B, dtype=float)
    factor = scipy.linalg.cho_factor(A)
    return scipy.linalg.cho_solve(factor, B.reshape(K, -1)).reshape(B.shape)
