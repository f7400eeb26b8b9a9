"""Numerical kernels shared by every test procedure.

Two rank conventions live here. Functions acting on a symmetric PSD matrix
(``numerical_rank``, ``pinv_sqrt``) cut eigenvalues below
``relative_threshold * lambda_max``, default ``1e-9``. Functions acting on a
design matrix ``X`` (``design_rank``, ``project_sq_norm``,
``least_squares_minnorm``) work from the thin SVD of ``X`` and by default use
the machine-precision rule ``sigma > max(n, d) * eps * sigma_max``; an explicit
``RankTolerance`` is interpreted as an eigenvalue ratio on ``X^T X``, i.e. a
singular-value ratio of ``sqrt(relative_threshold)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionError, PreconditionError, SymmetryError

DEFAULT_EIG_RTOL = 1e-9
SYMMETRY_RTOL = 1e-10


@dataclass(frozen=True)
class RankTolerance:
    """Eigenvalue cutoff relative to the largest eigenvalue."""

    relative_threshold: float = DEFAULT_EIG_RTOL

    def __post_init__(self):
        if not 0.0 < self.relative_threshold < 1.0:
            raise ValueError("relative_threshold must lie in (0, 1)")


TolLike = Union[RankTolerance, float, None]


def _eig_rtol(tol: TolLike) -> float:
    if tol is None:
        return DEFAULT_EIG_RTOL
    if isinstance(tol, RankTolerance):
        return tol.relative_threshold
    return RankTolerance(float(tol)).relative_threshold


def _svd_cutoff(sv: np.ndarray, shape: tuple[int, int], tol: TolLike) -> float:
    smax = sv[0] if sv.size else 0.0
    if tol is None:
        return max(shape) * np.finfo(float).eps * smax
    return math.sqrt(_eig_rtol(tol)) * smax


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix entries must be finite")
    return M


def _check_symmetric(M) -> np.ndarray:
    M = _as_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {M.shape}")
    scale = max(np.abs(M).max(initial=0.0), 1.0)
    if np.abs(M - M.T).max(initial=0.0) > SYMMETRY_RTOL * scale:
        raise SymmetryError("matrix is not symmetric")
    return 0.5 * (M + M.T)


def _psd_eigh(M, tol: TolLike):
    M = _check_symmetric(M)
    w, V = np.linalg.eigh(M)
    scale = np.abs(w).max(initial=0.0)
    rtol = _eig_rtol(tol)
    if scale > 0 and w.min() < -max(rtol, 1e-12) * scale:
        raise SymmetryError("matrix is not positive semidefinite")
    lmax = w.max(initial=0.0)
    if lmax <= 0.0:
        return w, V, np.zeros_like(w, dtype=bool)
    return w, V, w > rtol * lmax


def numerical_rank(M, tol: TolLike = None) -> int:
    """Number of eigenvalues of the symmetric PSD ``M`` above the relative cutoff."""
    _, _, keep = _psd_eigh(M, tol)
    return int(keep.sum())


def pinv_sqrt(M, tol: TolLike = None) -> np.ndarray:
    """PSD square root of the pseudo-inverse, ``M^{+/2}``."""
    w, V, keep = _psd_eigh(M, tol)
    inv_root = np.zeros_like(w)
    inv_root[keep] = 1.0 / np.sqrt(w[keep])
    return (V * inv_root) @ V.T


def pinv_psd(M, tol: TolLike = None) -> np.ndarray:
    """Pseudo-inverse of a symmetric PSD matrix with the same eigenvalue cutoff."""
    w, V, keep = _psd_eigh(M, tol)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def spectral_projector(M, tol: TolLike = None) -> np.ndarray:
    """Orthogonal projector onto the numerical range of ``M``."""
    _, V, keep = _psd_eigh(M, tol)
    Vr = V[:, keep]
    return Vr @ Vr.T


def thin_svd(X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = _as_matrix(X)
    return np.linalg.svd(X, full_matrices=False)


def column_basis(X, tol: TolLike = None, svd=None) -> np.ndarray:
    """Orthonormal basis (n x r) of the numerical column space of ``X``.

    ``svd`` may carry a precomputed ``thin_svd(X)`` to avoid refactorizing.
    """
    X = _as_matrix(X)
    U, s, _ = thin_svd(X) if svd is None else svd
    r = int((s > _svd_cutoff(s, X.shape, tol)).sum()) if s.size and s[0] > 0 else 0
    return U[:, :r]


def design_rank(X, tol: TolLike = None, svd=None) -> int:
    """Numerical rank of ``X``, equivalently of ``X^T X / n``."""
    return column_basis(X, tol, svd).shape[1]


def project_sq_norm(X, u, tol: TolLike = None, svd=None) -> float:
    """Squared norm of the orthogonal projection of ``u`` onto ``col(X)``."""
    X = _as_matrix(X)
    u = np.asarray(u, dtype=float)
    if u.shape != (X.shape[0],):
        raise DimensionError(f"u has shape {u.shape}, expected ({X.shape[0]},)")
    coef = column_basis(X, tol, svd).T @ u
    # float rounding can push the projection a hair above ||u||^2
    return float(min(coef @ coef, u @ u))


def sample_cov(X) -> np.ndarray:
    """Uncentered sample covariance ``X^T X / n``."""
    X = _as_matrix(X)
    if X.shape[0] == 0:
        raise PreconditionError("sample_cov needs at least one row")
    S = X.T @ X / X.shape[0]
    return 0.5 * (S + S.T)


def least_squares_minnorm(X, Y, tol: TolLike = None, svd=None) -> np.ndarray:
    """Minimum-norm least-squares solution ``X^+ Y`` via the truncated SVD."""
    X = _as_matrix(X)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (X.shape[0],):
        raise DimensionError(f"Y has shape {Y.shape}, expected ({X.shape[0]},)")
    U, s, Vt = thin_svd(X) if svd is None else svd
    if not s.size or s[0] <= 0:
        return np.zeros(X.shape[1])
    r = int((s > _svd_cutoff(s, X.shape, tol)).sum())
    return Vt[:r].T @ ((U[:, :r].T @ Y) / s[:r])


def lm_chi2_bound(degrees: int, deviation_x: float) -> tuple[float, float]:
    """Laurent-Massart right tail: ``P[chi2_s >= s + 2 sqrt(s x) + 2x] <= exp(-x)``.

    Returns ``(threshold, bound)``.
    """
    if int(degrees) != degrees or degrees < 1:
        raise PreconditionError("degrees must be a positive integer")
    if not (math.isfinite(deviation_x) and deviation_x >= 0):
        raise PreconditionError("deviation_x must be finite and nonnegative")
    s, x = float(degrees), float(deviation_x)
    return s + 2.0 * math.sqrt(s * x) + 2.0 * x, math.exp(-x)
