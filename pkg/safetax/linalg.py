"""
Dense linear-algebra kernels used by every other module.

All computation is float64. Matrices are plain 2-D numpy arrays; `as_matrix`
is the single place where the finite/shape invariants are enforced.
"""

import logging

from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DegenerateNormError, InputError, ShapeError

logger = logging.getLogger(__name__)

type Matrix = np.ndarray

# power iteration defaults
POWER_TOL = 1e-10
POWER_MAX_ITER = 1000
POWER_BLOCK = 4

# above this min-dimension truncated_svd switches to randomized subspace iteration
DENSE_SVD_LIMIT = 512
OVERSAMPLE = 8
SUBSPACE_ITERS = 4

# tolerance for the orthonormality check on projector bases
ORTHONORMAL_TOL = 1e-6


class TruncatedSVD(NamedTuple):
    """Top-t singular triplets. U is d x t, V is k x t, S is non-increasing."""

    U: Matrix
    S: np.ndarray
    V: Matrix

    @property
    def t(self) -> int:
        return len(self.S)

    def reconstruct(self) -> Matrix:
        return (self.U * self.S) @ self.V.T


def as_matrix(values, name: str = "matrix") -> Matrix:
    "returns values as a finite float64 2-D array with both dimensions >= 1"
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name}: empty dimension in shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError(f"{name}: contains NaN or Inf")
    return m


def frobenius_norm(M: Matrix) -> float:
    return float(np.linalg.norm(M, "fro"))


def spectral_norm(
    M: Matrix, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER
) -> float:
    """
    Largest singular value by power iteration on the smaller Gram matrix.

    A small block of POWER_BLOCK vectors is iterated together and the top Ritz
    value of the block is tracked until its relative change drops below tol.
    Iterating a block keeps convergence fast when the top two singular values
    are close. The start block comes from a fixed seed so repeated calls agree
    bitwise.
    """
    if tol <= 0:
        raise InputError(f"tol must be positive, got {tol}")
    if not np.any(M):
        raise DegenerateNormError("spectral norm of an all-zero matrix")

    gram = M.T @ M if M.shape[1] <= M.shape[0] else M @ M.T
    n = gram.shape[0]
    rng = np.random.default_rng(0)
    X, _ = np.linalg.qr(rng.standard_normal((n, min(n, POWER_BLOCK))))
    lam = float(np.linalg.eigvalsh(X.T @ gram @ X)[-1])
    residual = np.inf
    for _ in range(max_iter):
        X, _ = np.linalg.qr(gram @ X)
        new_lam = float(np.linalg.eigvalsh(X.T @ gram @ X)[-1])
        residual = abs(new_lam - lam) / max(abs(new_lam), np.finfo(float).tiny)
        lam = new_lam
        if residual < tol:
            return float(np.sqrt(max(lam, 0.0)))
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        iterate=X[:, 0],
        residual=residual,
    )


def stable_rank(M: Matrix) -> float:
    "||M||_F^2 / ||M||_2^2, clipped into [1, min(d, k)] against roundoff"
    if not np.any(M):
        raise DegenerateNormError("stable rank is undefined for an all-zero matrix")
    fro = frobenius_norm(M)
    spec = spectral_norm(M)
    value = (fro / spec) ** 2
    return float(min(max(value, 1.0), min(M.shape)))


def _fix_signs(U: Matrix, V: Matrix) -> tuple[Matrix, Matrix]:
    "make the first nonzero entry of every column of U nonnegative"
    U = U.copy()
    V = V.copy()
    for j in range(U.shape[1]):
        col = U[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-14 * max(np.abs(col).max(), 1e-300))
        if nz.size and col[nz[0]] < 0:
            U[:, j] = -col
            V[:, j] = -V[:, j]
    return U, V


def _randomized_svd(M: Matrix, t: int) -> tuple[Matrix, np.ndarray, Matrix]:
    "randomized range finder with subspace iteration, then an exact SVD of Q^T M"
    n_samples = min(t + OVERSAMPLE, min(M.shape))
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(M @ rng.standard_normal((M.shape[1], n_samples)))
    for _ in range(SUBSPACE_ITERS):
        Z, _ = np.linalg.qr(M.T @ Q)
        Q, _ = np.linalg.qr(M @ Z)
    U_small, S, Vt = np.linalg.svd(Q.T @ M, full_matrices=False)
    return (Q @ U_small)[:, :t], S[:t], Vt[:t].T


def truncated_svd(M: Matrix, t: int) -> TruncatedSVD:
    """
    Top-t singular triplets of M.

    Exact LAPACK decomposition when min(d, k) <= DENSE_SVD_LIMIT, randomized
    subspace iteration otherwise. Signs follow `_fix_signs`.
    """
    d, k = M.shape
    if not 1 <= t <= min(d, k):
        raise InputError(f"truncated_svd: t={t} outside [1, {min(d, k)}]")
    try:
        if min(d, k) <= DENSE_SVD_LIMIT:
            U, S, Vt = np.linalg.svd(M, full_matrices=False)
            U, S, V = U[:, :t], S[:t], Vt[:t].T
        else:
            logger.debug(f"randomized svd for {M.shape}, t={t}")
            U, S, V = _randomized_svd(M, t)
    except np.linalg.LinAlgError as ex:
        raise ConvergenceError(f"SVD of {M.shape} matrix failed: {ex}") from ex
    U, V = _fix_signs(U, V)
    return TruncatedSVD(U, np.maximum(S, 0.0), V)


def _check_basis(B: Matrix, n_rows: int, side: str) -> None:
    if B.ndim != 2 or B.shape[0] != n_rows:
        raise ShapeError(f"{side} basis shape {B.shape} does not match {n_rows} rows")
    if B.shape[1] == 0:
        return
    err = np.abs(B.T @ B - np.eye(B.shape[1])).max()
    if err > ORTHONORMAL_TOL:
        raise InputError(f"{side} basis is not orthonormal (max error {err:.2e})")


def project_col_complement(M: Matrix, U: Matrix) -> Matrix:
    "(I - U U^T) M, without forming the d x d projector"
    _check_basis(U, M.shape[0], "column")
    return M - U @ (U.T @ M)


def project_row_complement(M: Matrix, V: Matrix) -> Matrix:
    "M (I - V V^T), without forming the k x k projector"
    _check_basis(V, M.shape[1], "row")
    return M - (M @ V) @ V.T
