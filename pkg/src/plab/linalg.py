"""Dense float64 matrix kernels used by the metrics and the optimizer oracles.

A "matrix" here is any 2-D array-like coerced to C-contiguous float64;
vectors are 1-D float64. All routines are pure functions over their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NotPositiveDefiniteError, NumericError

# Singular values below SPECTRUM_CLIP * sigma_max are treated as exact zeros
# by the rank metrics; keeps erank/srank stable against float noise.
SPECTRUM_CLIP = 1e-12

SYMMETRY_TOL = 1e-10


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2 or min(m.shape) < 1:
        raise InvalidInputError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InvalidInputError("matrix contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """Singular values sorted descending; factors kept only when requested."""

    singular_values: np.ndarray
    u: np.ndarray | None = None
    vt: np.ndarray | None = None


def svd(a, want_vectors: bool = True) -> SvdResult:
    """Full SVD of a dense matrix; singular values descending, count = min(m, n)."""
    m = as_matrix(a)
    try:
        if want_vectors:
            u, s, vt = np.linalg.svd(m, full_matrices=False)
            return SvdResult(s, u, vt)
        s = np.linalg.svd(m, compute_uv=False)
        return SvdResult(s)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge within the LAPACK iteration cap: {exc}") from exc


def clip_spectrum(s: np.ndarray) -> np.ndarray:
    """Zero out singular values below SPECTRUM_CLIP relative to sigma_max."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        return s
    out = s.copy()
    out[out < SPECTRUM_CLIP * out.max(initial=0.0)] = 0.0
    return out


def solve_spd(m, b) -> np.ndarray:
    """Solve m x = b for symmetric positive definite m via Cholesky.

    Symmetry is checked to SYMMETRY_TOL (relative to the Frobenius scale);
    positive definiteness is detected by the factorization itself.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"solve_spd needs a square matrix, got shape {m.shape}")
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.shape != (m.shape[0],):
        raise InvalidInputError(f"rhs shape {b.shape} does not match matrix shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if np.abs(m - m.T).max() > SYMMETRY_TOL * scale:
        raise InvalidInputError("matrix is not symmetric to 1e-10")
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"matrix is not positive definite: {exc}") from exc
    y = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, y)


def frobenius_norm(m) -> float:
    """sqrt of the sum of squared entries."""
    m = as_matrix(m)
    return float(np.sqrt((m * m).sum()))
