"""Tolerance-driven dense linear algebra: rank, nullspace, pseudoinverse.

All rank decisions use a tolerance relative to the largest singular value,
falling back to an absolute threshold when the matrix is zero. Functions
accept stacks of matrices (``shape == (..., rows, cols)``) where noted.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DEFAULT_TOL",
    "RankDeficiencyError",
    "as_matrix",
    "singular_values",
    "rank",
    "rank_margin",
    "nullspace",
    "pseudoinverse",
    "augmented_rank_preserved",
]

DEFAULT_TOL = 1e-8


class RankDeficiencyError(ValueError):
    pass


def as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim < 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    return M


def singular_values(M) -> np.ndarray:
    """Singular values in descending order (stacked input allowed)."""
    M = as_matrix(M)
    if 0 in M.shape[-2:]:
        return np.zeros(M.shape[:-2] + (0,))
    return np.linalg.svd(M, compute_uv=False)


def _threshold(s: np.ndarray, tol: float) -> np.ndarray:
    if s.shape[-1] == 0:
        return np.full(s.shape[:-1], tol)
    top = s[..., 0]
    return np.where(top > 0, tol * top, tol)


def rank(M, tol: float = DEFAULT_TOL):
    """Numerical rank: count of singular values above ``tol * sigma_1``.

    Returns an int for a single matrix, an integer array for a stack.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    s = singular_values(M)
    r = np.sum(s > _threshold(s, tol)[..., None], axis=-1)
    return int(r) if np.ndim(r) == 0 else r


def rank_margin(M, r: int) -> float:
    """Relative size ``sigma_{r+1} / sigma_1`` of the first singular value past ``r``.

    Zero when the matrix has no singular value past ``r`` or is zero. This is
    the quantity a rank test compares against its tolerance.
    """
    s = singular_values(M)
    if r >= s.shape[-1] or s[0] == 0:
        return 0.0
    return float(s[r] / s[0])


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    # Sign-fix each row so its largest-magnitude entry is positive.
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=-1)
    signs = np.sign(np.take_along_axis(V, idx[:, None], axis=-1))
    signs[signs == 0] = 1.0
    return V * signs


def nullspace(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Orthonormal basis of the right nullspace, one vector per row.

    The returned array has shape ``(cols - rank(M, tol), cols)``.
    """
    M = as_matrix(M)
    cols = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(cols)
    _, s, Vh = np.linalg.svd(M, full_matrices=True)
    r = int(np.sum(s > _threshold(s, tol)))
    return _canonical_signs(Vh[r:].copy())


def pseudoinverse(M, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse with singular values below ``tol * sigma_1`` dropped."""
    M = as_matrix(M)
    rows, cols = M.shape
    if rows == 0 or cols == 0:
        return np.zeros((cols, rows))
    U, s, Vh = np.linalg.svd(M, full_matrices=False)
    keep = s > _threshold(s, tol)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vh.T * inv) @ U.T


def augmented_rank_preserved(base, extra_row, tol: float = DEFAULT_TOL, require_full_rank: bool = True) -> bool:
    """True iff appending ``extra_row`` to ``base`` leaves the numerical rank unchanged.

    This is the wedge test: the extra row lies in the row span of ``base``
    exactly when the wedge of the base rows with it vanishes.

    Raises
    ------
    RankDeficiencyError
        If ``require_full_rank`` and ``base`` does not have full row rank.
    """
    base = as_matrix(base)
    extra_row = np.asarray(extra_row, dtype=float).reshape(1, -1)
    r = rank(base, tol)
    if require_full_rank and r < base.shape[0]:
        raise RankDeficiencyError(f"base has rank {r} < {base.shape[0]} rows")
    return rank(np.vstack([base, extra_row]), tol) == r
