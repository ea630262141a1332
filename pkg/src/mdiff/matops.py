"""Dense small-matrix kernels shared by the whole package.

Everything here operates on matrices of size K or 2K with K <= 8, so the
implementations favour robustness and clarity over asymptotic cleverness.
``expm`` accepts stacked inputs ``(..., n, n)`` because the ELBO estimator
evaluates many transition kernels at once.
"""

from __future__ import annotations

import math

import numpy as np


class MatrixError(ValueError):
    """Base class for numerical failures in this module."""


class FactorizationError(MatrixError):
    """Cholesky pivot failure; carries the offending pivot index."""

    def __init__(self, message: str, pivot: int):
        super().__init__(message)
        self.pivot = pivot


class SingularMatrixError(MatrixError):
    """Solve refused: matrix numerically singular."""


# Pade-13 coefficients for the scaling-and-squaring matrix exponential.
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
    33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0,
)
_THETA13 = 5.371920351148152


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise MatrixError(f"{what}: non-finite entries")
    return m


def expm(m: np.ndarray) -> np.ndarray:
    """Matrix exponential, scaling-and-squaring with a fixed Pade-13 core.

    Accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``; the
    squaring count is chosen per matrix.
    """
    a = _check_finite(m, "expm")
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise MatrixError(f"expm: expected square matrices, got {a.shape}")
    n = a.shape[-1]
    norm1 = np.abs(a).sum(axis=-2).max(axis=-1)  # induced 1-norm per matrix
    with np.errstate(divide="ignore"):
        squarings = np.ceil(np.log2(np.maximum(norm1, 1e-300) / _THETA13))
    squarings = np.maximum(squarings, 0.0).astype(int)
    a = a * (0.5 ** squarings)[..., None, None]

    ident = np.broadcast_to(np.eye(n), a.shape)
    b = _PADE13
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    try:
        result = np.linalg.solve(v - u, v + u)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - pathological
        raise SingularMatrixError(f"expm: Pade solve failed: {exc}") from exc

    max_sq = int(squarings.max()) if squarings.size else 0
    if a.ndim == 2:
        for _ in range(int(squarings)):
            result = result @ result
    else:
        for j in range(max_sq):
            mask = squarings > j
            result[mask] = result[mask] @ result[mask]
    return result


def expm_frechet(a: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Frechet derivative of expm at ``a`` in direction ``e`` (block method)."""
    a = _check_finite(a, "expm_frechet")
    e = _check_finite(e, "expm_frechet")
    n = a.shape[-1]
    top = np.concatenate([a, e], axis=-1)
    bottom = np.concatenate([np.zeros_like(a), a], axis=-1)
    block = np.concatenate([top, bottom], axis=-2)
    return expm(block)[..., :n, n:]


def cholesky(m: np.ndarray, return_jitter: bool = False):
    """Lower-Cholesky factor of a symmetric positive (semi-)definite matrix.

    On a pivot failure the diagonal is jittered by ``1e-10 * trace / dim``
    and the factorization retried up to 3 times with 10x escalation.
    Raises :class:`FactorizationError` (with the pivot index) if that fails.
    """
    a = _check_finite(m, "cholesky")
    n = a.shape[0]
    if a.shape != (n, n):
        raise MatrixError(f"cholesky: expected square matrix, got {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > 1e-9 * scale:
        raise MatrixError("cholesky: input not symmetric within tolerance")

    jitter = 0.0
    base = 1e-10 * np.trace(a) / n
    last_pivot = 0
    for attempt in range(4):
        try:
            lower = _chol_core(a + jitter * np.eye(n))
            return (lower, jitter) if return_jitter else lower
        except FactorizationError as exc:
            last_pivot = exc.pivot
            jitter = base * (10.0 ** attempt) if base > 0 else 10.0 ** (attempt - 12) * scale
    raise FactorizationError(
        f"cholesky: not positive definite after jitter (pivot {last_pivot})",
        last_pivot)


def _chol_core(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - lower[j, :j] @ lower[j, :j]
        if d <= 0.0:
            raise FactorizationError(f"cholesky: nonpositive pivot at {j}", j)
        lower[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            lower[i, j] = (a[i, j] - lower[i, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def cholesky_psd(m: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Cholesky-like factor for PSD matrices, tolerating zero pivots.

    Used for transition covariances that are singular by construction
    (s = 0, or the zero data block under data-only conditioning).
    """
    a = _check_finite(m, "cholesky_psd")
    n = a.shape[0]
    scale = max(np.abs(a).max(), 1.0)
    lower = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - lower[j, :j] @ lower[j, :j]
        if d <= tol * scale:
            if d < -1e-8 * scale:
                raise FactorizationError(
                    f"cholesky_psd: negative pivot at {j}", j)
            continue  # rank-deficient direction: leave the column zero
        lower[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            lower[i, j] = (a[i, j] - lower[i, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` with a conditioning guard."""
    a = _check_finite(a, "solve")
    b = _check_finite(b, "solve")
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise SingularMatrixError(f"solve: matrix numerically singular (cond={cond:.3e})")
    return np.linalg.solve(a, b)


def make_skew(q_tilde: np.ndarray) -> np.ndarray:
    """Antisymmetrize: the image of this map spans all skew-symmetric matrices."""
    q = _check_finite(q_tilde, "make_skew")
    return q - q.T


def make_psd(d_tilde: np.ndarray) -> np.ndarray:
    """Gram product, spanning all positive semi-definite matrices."""
    d = _check_finite(d_tilde, "make_psd")
    return d @ d.T


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))
