"""Dense symmetric linear algebra for correlation statistics.

Batch second moments, cross moments, jittered Cholesky log-determinants,
and canonical-correlation spectra. All functions are pure, work in
float64, and return bit-identical results for identical inputs; moment
accumulation goes through a single BLAS path with fixed instance-major
ordering.
"""

from __future__ import annotations

import numpy as np

# Escalation base when the caller asked for jitter == 0 and the plain
# factorization fails; multiplying zero by ten would never escalate.
_ZERO_JITTER_BASE = 1e-12
_ESCALATIONS = 3


def _as_matrix(m: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _check_symmetric(a: np.ndarray) -> None:
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * scale):
        raise ValueError("matrix is not symmetric")


def second_moment(features: np.ndarray) -> np.ndarray:
    """Batch second-moment matrix (1/N) sum_i x_i x_i^T.

    ``features`` is N x d with N >= 1. The result is positive
    semidefinite; it is explicitly symmetrized to strip accumulation
    asymmetry from the matrix product.
    """
    x = _as_matrix(features, "features")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    m = x.T @ x / x.shape[0]
    return (m + m.T) / 2.0


def cross_moment(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batch cross-moment matrix (1/N) sum_i a_i b_i^T, shape d1 x d2."""
    am = _as_matrix(a, "a")
    bm = _as_matrix(b, "b")
    if am.shape[0] != bm.shape[0]:
        raise ValueError(
            f"row counts differ: {am.shape[0]} vs {bm.shape[0]}"
        )
    if am.shape[0] == 0:
        raise ValueError("empty batch")
    return am.T @ bm / am.shape[0]


def logdet_pd(m: np.ndarray, jitter: float = 0.0) -> float:
    """log det(m + jitter*I) via Cholesky, as 2 * sum(log diag(L)).

    ``m`` must be symmetric and ``jitter`` non-negative. If the
    factorization fails, the jitter is escalated by factors of ten up to
    three times before giving up with ``ValueError("matrix not positive
    definite")``.
    """
    a = _as_matrix(m, "m")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got shape {a.shape}")
    _check_symmetric(a)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    eye = np.eye(a.shape[0])
    j = float(jitter)
    for attempt in range(_ESCALATIONS + 1):
        try:
            chol = np.linalg.cholesky(a + j * eye)
        except np.linalg.LinAlgError:
            j = max(j, _ZERO_JITTER_BASE) * 10.0
            continue
        return float(2.0 * np.sum(np.log(np.diag(chol))))
    raise ValueError("matrix not positive definite")


def pd_inverse(m: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Inverse of a positive definite matrix (plus optional jitter).

    Computed as L^{-T} L^{-1} from the Cholesky factor so the result is
    symmetric by construction. No jitter escalation: this is used for
    gradients, which must match the loss evaluated at the same jitter.
    """
    a = _as_matrix(m, "m")
    n = a.shape[0]
    try:
        chol = np.linalg.cholesky(a + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        raise ValueError("matrix not positive definite") from None
    linv = np.linalg.solve(chol, np.eye(n))
    return linv.T @ linv


def assemble_block(r1: np.ndarray, p12: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Joint matrix [[r1, p12], [p12^T, r2]] of shape (d1+d2, d1+d2)."""
    a = _as_matrix(r1, "r1")
    b = _as_matrix(p12, "p12")
    c = _as_matrix(r2, "r2")
    if b.shape != (a.shape[0], c.shape[0]):
        raise ValueError(
            f"p12 shape {b.shape} inconsistent with r1 {a.shape} / r2 {c.shape}"
        )
    top = np.hstack([a, b])
    bottom = np.hstack([b.T, c])
    return np.vstack([top, bottom])


def _inv_sqrt_pd(m: np.ndarray, jitter: float) -> np.ndarray:
    """Symmetric inverse square root of (m + jitter*I).

    Eigenvalues are floored at the jitter before inversion; anything
    still non-positive means the input is not positive definite at this
    jitter.
    """
    w, v = np.linalg.eigh(m + jitter * np.eye(m.shape[0]))
    w = np.maximum(w, jitter)
    if np.any(w <= 0.0):
        raise ValueError("matrix not positive definite")
    return (v * (1.0 / np.sqrt(w))) @ v.T


def canonical_correlations(
    r1: np.ndarray, r2: np.ndarray, p12: np.ndarray, jitter: float = 0.0
) -> np.ndarray:
    """Canonical correlations of two feature sets from their moments.

    Returns the singular values of
    (r1 + jitter*I)^{-1/2} p12 (r2 + jitter*I)^{-1/2}, clipped to [0, 1]
    and sorted descending. These satisfy the identity
    logdet(joint) - logdet(r1) - logdet(r2) = sum_k log(1 - rho_k^2)
    when all three log-determinants use the same jitter.
    """
    a = _as_matrix(r1, "r1")
    c = _as_matrix(r2, "r2")
    b = _as_matrix(p12, "p12")
    if b.shape != (a.shape[0], c.shape[0]):
        raise ValueError(
            f"p12 shape {b.shape} inconsistent with r1 {a.shape} / r2 {c.shape}"
        )
    _check_symmetric(a)
    _check_symmetric(c)
    left = _inv_sqrt_pd(a, jitter)
    right = _inv_sqrt_pd(c, jitter)
    sing = np.linalg.svd(left @ b @ right, compute_uv=False)
    return np.clip(sing, 0.0, 1.0)
