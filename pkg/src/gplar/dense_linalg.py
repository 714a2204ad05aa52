"""Dense Cholesky-based linear algebra in float64.

Trajectories are stored as ``L x d_z`` matrices, so the Kronecker
covariance ``K ⊗ I_{d_z}`` is never formed: a solve against it is a
solve against ``K`` applied column by column, which is what a
multi-right-hand-side triangular solve already does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import NotPositiveDefinite, NotSymmetricError, ShapeError

SYMMETRY_ATOL = 1e-12
KRON_MAX_SIZE = 64


def _as_square(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ShapeError(f"expected a non-empty square matrix, got shape {A.shape}")
    return A


def symmetrize(A, atol: float = SYMMETRY_ATOL) -> np.ndarray:
    """Return ``(A + A.T) / 2`` after checking ``|A - A.T| <= atol``."""
    A = _as_square(A)
    if not np.all(np.isfinite(A)):
        raise ShapeError("matrix has non-finite entries")
    asym = np.max(np.abs(A - A.T))
    if asym > atol:
        raise NotSymmetricError(f"matrix asymmetry {asym:.3e} exceeds {atol:.1e}")
    return 0.5 * (A + A.T)


def cholesky(A) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefinite
        With the 1-based index of the first non-positive pivot.
    """
    A = symmetrize(A)
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info)
    if info < 0:  # pragma: no cover - argument error inside LAPACK
        raise ValueError(f"dpotrf argument {-info} invalid")
    return c


def _check_rhs(L: np.ndarray, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim not in (1, 2) or b.shape[0] != L.shape[0]:
        raise ShapeError(f"right-hand side of shape {b.shape} does not conform with {L.shape}")
    return b


def solve_lower(L, b) -> np.ndarray:
    """Solve ``L x = b`` for lower-triangular ``L``; ``b`` is a vector or matrix."""
    L = _as_square(L)
    b = _check_rhs(L, b)
    return solve_triangular(L, b, lower=True, check_finite=False)


def solve_upper_t(L, b) -> np.ndarray:
    """Solve ``L.T x = b`` for lower-triangular ``L``."""
    L = _as_square(L)
    b = _check_rhs(L, b)
    return solve_triangular(L, b, lower=True, trans="T", check_finite=False)


def solve_chol(L, b) -> np.ndarray:
    """Solve ``(L L.T) x = b`` by a forward and a backward sweep."""
    return solve_upper_t(L, solve_lower(L, b))


def logdet_from_chol(L) -> float:
    L = _as_square(L)
    return float(2.0 * np.sum(np.log(np.diag(L))))


def inverse_from_chol(L) -> np.ndarray:
    """Explicit ``(L L.T)^{-1}``; only for small matrices and gradients."""
    Linv = solve_lower(L, np.eye(L.shape[0]))
    return Linv.T @ Linv


def inverse_diag_from_chol(L) -> np.ndarray:
    """Diagonal of ``(L L.T)^{-1}`` as column sums of squares of ``L^{-1}``."""
    Linv = solve_lower(L, np.eye(L.shape[0]))
    return np.einsum("ij,ij->j", Linv, Linv)


@dataclass(frozen=True)
class KronReport:
    L: int
    d_z: int
    det_relerr: float
    inv_relerr: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.det_relerr <= self.tol and self.inv_relerr <= self.tol


def kron_identities_check(K, d_z: int, tol: float = 1e-8) -> KronReport:
    """Verify ``det(K⊗I)=det(K)^d_z`` and ``(K⊗I)^{-1}=K^{-1}⊗I`` explicitly.

    Test-only: materializes the ``L*d_z`` square Kronecker product, so the
    size is capped at 64.
    """
    K = _as_square(getattr(K, "K", K))
    n = K.shape[0]
    if d_z < 1 or n * d_z > KRON_MAX_SIZE:
        raise ShapeError(f"L*d_z = {n * d_z} outside [1, {KRON_MAX_SIZE}]")
    I = np.eye(d_z)
    big = np.kron(K, I)

    sign_big, ld_big = np.linalg.slogdet(big)
    sign_k, ld_k = np.linalg.slogdet(K)
    if sign_big != sign_k**d_z:
        det_relerr = np.inf
    else:
        det_relerr = abs(np.expm1(ld_big - d_z * ld_k))

    lhs = np.linalg.inv(big)
    rhs = np.kron(np.linalg.inv(K), I)
    inv_relerr = np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)
    return KronReport(n, d_z, float(det_relerr), float(inv_relerr), tol)
