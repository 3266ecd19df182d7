"""SVD helpers used by the TT-SVD initialiser."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np


class SvdResult(NamedTuple):
    """Thin SVD ``A = U @ diag(S) @ V.T`` (note: ``V``, not ``V^T``)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD with singular values in descending order."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("svd input contains non-finite entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        # gesdd occasionally fails to converge; gesvd is slower but more robust
        import scipy.linalg

        u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
    return SvdResult(u, s, vt.T)


def default_rank_tol(shape) -> float:
    return 1e-8 * max(shape)


def numerical_rank(a: np.ndarray, rel_tol: float | None = None) -> int:
    """Number of singular values above ``rel_tol * S_max``.

    The default tolerance is ``1e-8 * max(a.shape)``.
    """
    a = np.asarray(a, dtype=np.float64)
    if rel_tol is None:
        rel_tol = default_rank_tol(a.shape)
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def truncated_svd(a: np.ndarray, r: int) -> SvdResult:
    """Best rank-``r`` factors (Eckart-Young)."""
    a = np.asarray(a, dtype=np.float64)
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r} outside 1..{min(a.shape)}")
    full = svd(a)
    return SvdResult(full.U[:, :r], full.S[:r], full.V[:, :r])
