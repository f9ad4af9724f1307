"""Dense linear algebra helpers.

Thin, validated wrappers over LAPACK (via numpy/scipy). Every function is
pure and accepts array-likes; inputs are never modified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

#: relative singular-value cutoff for numerical rank in :func:`lstsq_min_norm`
LSTSQ_RTOL = 1e-10
#: returned by :func:`cond_number` for rank-deficient input
COND_SENTINEL = float(np.finfo(float).max)

SYMMETRY_RTOL = 1e-12


class DimensionError(ValueError):
    pass


class SymmetryError(ValueError):
    pass


class DefinitenessError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SymEig:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def sym_eig(A) -> SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    A = _as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {A.shape}")
    scale = max(np.abs(A).max(initial=0.0), 1e-300)
    if np.abs(A - A.T).max(initial=0.0) > SYMMETRY_RTOL * scale:
        raise SymmetryError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return SymEig(w, V)


def lstsq_min_norm(A, b, rtol: float = LSTSQ_RTOL):
    """Minimum-norm least-squares solution of ``A x ~ b``.

    Singular values below ``rtol * sigma_max`` are treated as zero, so an
    underdetermined or rank-deficient system returns the smallest-norm
    minimiser rather than raising.

    Returns
    -------
    x : ndarray
    rank : int
        numerical rank of ``A`` at the given tolerance
    residual : float
        ``||A x - b||_2``
    """
    A = _as_matrix(A)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[0] != b.shape[0]:
        raise DimensionError(f"rows(A)={A.shape[0]} but len(b)={b.shape[0]}")
    if A.size == 0:
        return np.zeros(A.shape[1]), 0, float(np.linalg.norm(b))
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    cutoff = rtol * s[0] if s.size else 0.0
    keep = s > cutoff
    rank = int(keep.sum())
    coef = (U[:, keep].T @ b) / s[keep]
    x = Vt[keep].T @ coef
    residual = float(np.linalg.norm(A @ x - b))
    return x, rank, residual


def solve_spd(A, b) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive-definite ``A`` by Cholesky."""
    A = _as_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0]:
        raise DimensionError(f"incompatible shapes {A.shape} and {b.shape}")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError(f"matrix is not positive definite: {exc}") from None
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


def singular_values(A) -> np.ndarray:
    return np.linalg.svd(_as_matrix(A), compute_uv=False)


def cond_number(A, rtol: float = LSTSQ_RTOL) -> float:
    """sigma_max / sigma_min; :data:`COND_SENTINEL` when rank-deficient."""
    A = _as_matrix(A)
    if A.size == 0:
        raise DimensionError("cond_number of an empty matrix")
    s = singular_values(A)
    if s[0] == 0.0 or min(A.shape) < A.shape[1] or s[-1] <= rtol * s[0]:
        return COND_SENTINEL
    return float(s[0] / s[-1])
