"""Dense float64 matrix kernel.

Log-volume of the Gram determinant and its gradient, row normalization
onto the probability simplex, and a central-difference gradient oracle
that the analytic backward passes are certified against.

All functions are pure and operate on 2-D numpy arrays; nothing here
holds state, so concurrent callers are safe.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.linalg

# Determinants at or below this are treated as a collapsed Gram matrix.
DET_FLOOR = 1e-300
_LOG_DET_FLOOR = float(np.log(DET_FLOOR))

# Row sums at or below this cannot be normalized meaningfully.
ROW_SUM_FLOOR = 1e-300


class SingularGram(Exception):
    """T'T is numerically singular or its determinant underflows."""


class ZeroRow(Exception):
    """A row sums to (numerically) zero and cannot be normalized."""


class NonFinite(Exception):
    """A function probe produced NaN or Inf."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate ``data`` as a finite 2-D float64 matrix and return a copy.

    Used at every boundary where matrices enter from user input (config
    files, CSV, checkpoints).  Raises ``ValueError`` on wrong rank and
    ``NonFinite`` on NaN/Inf entries.
    """
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NonFinite(f"{name}: matrix contains NaN or Inf entries")
    return m


def _gram_cholesky(t: np.ndarray) -> np.ndarray:
    """Cholesky factor of the symmetrized Gram matrix T'T.

    LAPACK will happily factor an exactly rank-deficient Gram with a
    sqrt(eps)-sized pivot instead of failing, so pivots are also checked
    against a rank tolerance relative to the Gram's scale.
    """
    gram = t.T @ t
    gram = (gram + gram.T) / 2.0
    try:
        chol = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError as exc:
        raise SingularGram("Gram matrix T'T is not positive definite") from exc
    k = gram.shape[0]
    tol = k * np.finfo(np.float64).eps * float(np.max(np.diag(gram)))
    if np.any(np.diag(chol) ** 2 <= tol):
        raise SingularGram("Gram matrix T'T is numerically rank deficient")
    return chol


def gram_logvol(t: np.ndarray) -> float:
    """log sqrt(det(T'T)) for a tall matrix T with rows >= cols.

    The determinant is never formed directly: the Gram matrix is
    factorized (Cholesky, after symmetrization) and the log-determinant
    is accumulated from the factor diagonal, so moderately ill-conditioned
    inputs do not overflow or underflow.

    Raises
    ------
    SingularGram
        If T'T is not positive definite or det(T'T) falls at or below
        the 1e-300 floor.
    ValueError
        If T has fewer rows than columns.
    """
    t = np.asarray(t, dtype=np.float64)
    rows, cols = t.shape
    if rows < cols:
        raise ValueError(f"need rows >= cols, got shape {t.shape}")
    chol = _gram_cholesky(t)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    if not np.isfinite(logdet) or logdet <= _LOG_DET_FLOOR:
        raise SingularGram("det(T'T) underflows the 1e-300 floor")
    return 0.5 * logdet


def grad_gram_logvol(t: np.ndarray) -> np.ndarray:
    """Gradient of ``gram_logvol`` with respect to T, which is T (T'T)^-1.

    Solved through the same Cholesky factorization used by the forward
    value; the inverse is never materialized.
    """
    t = np.asarray(t, dtype=np.float64)
    rows, cols = t.shape
    if rows < cols:
        raise ValueError(f"need rows >= cols, got shape {t.shape}")
    chol = _gram_cholesky(t)
    # Solve (L L') X = T'  =>  grad = X' = T (T'T)^-1
    x = scipy.linalg.cho_solve((chol, True), t.T, check_finite=False)
    return np.ascontiguousarray(x.T)


def row_normalize(m: np.ndarray) -> np.ndarray:
    """Divide each row by its sum so rows land on the probability simplex.

    Raises ``ZeroRow`` if any row sum is at or below the 1e-300 floor
    (the sign of the entries is the caller's business; only collapse is
    guarded against).
    """
    m = np.asarray(m, dtype=np.float64)
    sums = m.sum(axis=1, keepdims=True)
    bad = np.nonzero(sums[:, 0] <= ROW_SUM_FLOOR)[0]
    if bad.size:
        raise ZeroRow(f"rows {bad.tolist()} sum to <= {ROW_SUM_FLOOR}")
    return m / sums


def fd_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    This is the independent oracle used to certify every hand-derived
    backward pass; it deliberately shares no code with any analytic
    gradient in the package.

    Raises
    ------
    NonFinite
        If any probe evaluation comes back NaN or Inf.
    ValueError
        If ``eps`` is not strictly positive.
    """
    if not eps > 0.0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        fplus = float(f(xp))
        fminus = float(f(xm))
        if not (np.isfinite(fplus) and np.isfinite(fminus)):
            raise NonFinite(f"probe at index {idx} produced a non-finite value")
        grad[idx] = (fplus - fminus) / (2.0 * eps)
    return grad


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over entries of |a - b| / max(|a|, |b|, 1e-8).

    The shared agreement metric for gradient certification; the 1e-8
    floor keeps near-zero entries from dividing by noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
