"""Dense float64 linear algebra used throughout the forecaster.

Everything operates on plain 2-D ``numpy.ndarray`` matrices. The heavy
factorizations (SVD, eigenvalues) are delegated to LAPACK via numpy; the
pseudoinverse is built on top of the SVD so its truncation rule stays explicit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

Matrix = np.ndarray

#: Relative singular-value cutoff for the pseudoinverse. Operators here are
#: small (D <= 128), so truncation only needs to remove genuine rank loss.
DEFAULT_RCOND = 1e-12

#: Iteration budget communicated with non-convergence errors. LAPACK applies
#: its own internal sweep cap; this is the documented equivalent.
SVD_ITERATION_CAP = 10_000


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array, raising ShapeError otherwise."""
    out = np.asarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: Matrix) -> Matrix:
    return as_matrix(a).T.copy()


def add(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def sub(a: Matrix, b: Matrix) -> Matrix:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract {b.shape} from {a.shape}")
    return a - b


def scale(a: Matrix, factor: float) -> Matrix:
    return as_matrix(a) * float(factor)


def frobenius_norm(a: Matrix) -> float:
    return float(np.linalg.norm(as_matrix(a)))


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: ``u @ diag(singular_values) @ vt`` reconstructs the input.

    ``u`` is m x k, ``vt`` is k x n with k = min(m, n); singular values are
    non-negative and sorted descending.
    """

    u: Matrix
    singular_values: np.ndarray
    vt: Matrix


def svd(a: Matrix) -> SvdResult:
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise NumericError(f"svd requires finite entries, got non-finite in shape {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"svd did not converge within {SVD_ITERATION_CAP} iterations: {exc}") from exc
    return SvdResult(u=u, singular_values=s, vt=vt)


def pinv(a: Matrix, rcond: float = DEFAULT_RCOND) -> Matrix:
    """Moore-Penrose inverse via SVD truncation.

    Singular values below ``rcond * s_max`` are treated as exact zeros, so the
    result satisfies the four Penrose conditions also for rank-deficient input.
    """
    if rcond <= 0:
        raise ValueError(f"rcond must be positive, got {rcond}")
    res = svd(a)
    s = res.singular_values
    cutoff = rcond * (s[0] if s.size else 0.0)
    inv_s = np.where(s > cutoff, np.divide(1.0, s, out=np.zeros_like(s), where=s > 0), 0.0)
    return (res.vt.T * inv_s) @ res.u.T


def eigenvalues(a: Matrix) -> np.ndarray:
    """All eigenvalues (with multiplicity) of a square real matrix, complex128."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"eigenvalues needs a square matrix, got {a.shape}")
    try:
        return np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigenvalue iteration did not converge: {exc}") from exc
