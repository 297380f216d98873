"""Simplex noise-transition matrix and its regularizers.

The transition matrix T has C + n rows (C closed-set classes observed in
the pseudo labels, n extra open-set rows) and C columns; entry (j, k) is
p(pseudo = k | true = j).  T is never optimized directly: a free matrix U
is squashed through a sigmoid, scaled by the pseudo-label class
distribution, given an identity prior on the closed block and then
row-normalized, which keeps T row-stochastic and diagonally dominant on
the closed block by construction.

Three penalties shape T during training:

* ``volume_loss``   - log-volume of the row simplex; minimizing it
  shrink-wraps the simplex onto the observed noisy posteriors.
* ``anchor_loss``   - squared pull of selected rows toward empirically
  detected anchor posteriors.
* ``convex_inner_loss`` / ``convex_outer_loss`` - a minimax pair keeping
  every row away from convex combinations of the other rows, so no row
  collapses into the simplex spanned by the rest.

All gradients here are hand-derived and certified against the
central-difference oracle in ``simt.linalg``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .linalg import gram_logvol, grad_gram_logvol, row_normalize

logger = logging.getLogger(__name__)

# Class-distribution entries are floored here before scaling sigmoid(U),
# so a class absent from the pseudo labels cannot zero out a column.
CLASS_DIST_FLOOR = 1e-6


@dataclass
class SimTParams:
    """Free parameters behind the transition matrix.

    U : (C + n, C) unconstrained matrix, optimized by gradient descent.
    class_dist : (C,) pseudo-label frequencies, fixed during training.
    """

    U: np.ndarray
    class_dist: np.ndarray
    C: int
    n: int

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=np.float64)
        self.class_dist = np.asarray(self.class_dist, dtype=np.float64)
        if self.C < 2:
            raise ValueError(f"need at least two closed classes, got C={self.C}")
        if self.n < 1:
            raise ValueError(f"need at least one open row, got n={self.n}")
        if self.n == 1:
            logger.warning("n=1 open row is permitted but rarely enough; "
                           "consider n > 1")
        if self.U.shape != (self.C + self.n, self.C):
            raise ValueError(
                f"U must be ({self.C + self.n}, {self.C}), got {self.U.shape}")
        if not np.all(np.isfinite(self.U)):
            raise ValueError("U contains non-finite entries")
        if self.class_dist.shape != (self.C,):
            raise ValueError(
                f"class_dist must have length {self.C}, got {self.class_dist.shape}")
        if np.any(self.class_dist < 0.0) or np.any(self.class_dist > 1.0):
            raise ValueError("class_dist entries must lie in [0, 1]")
        if abs(float(self.class_dist.sum()) - 1.0) > 1e-9:
            raise ValueError("class_dist must sum to 1 within 1e-9")


@dataclass
class WeightingParams:
    """Free parameters behind the weighting matrix u (one row per T row)."""

    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        k = self.W.shape[0]
        if self.W.ndim != 2 or self.W.shape != (k, k) or k < 2:
            raise ValueError(f"W must be square with side >= 2, got {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ValueError("W contains non-finite entries")


@dataclass
class AnchorSet:
    """Per-row anchor posteriors for the transition matrix.

    posteriors : (C + n, C) noisy-class posterior of each row's anchor
        instance; rows where ``present`` is False are ignored.
    present : (C + n,) bool mask of rows that found an anchor.
    """

    posteriors: np.ndarray
    present: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.posteriors.ndim != 2:
            raise ValueError("posteriors must be 2-D")
        if self.present.shape != (self.posteriors.shape[0],):
            raise ValueError("present mask must have one entry per row")
        rows = self.posteriors[self.present]
        if rows.size and np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("present anchor posteriors must sum to 1")


def _sigmoid_scaled(params: SimTParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (sigmoid(U), floored class_dist, pre-normalization V)."""
    sig = expit(params.U)
    cd = np.maximum(params.class_dist, CLASS_DIST_FLOOR)
    v = cd[None, :] * sig
    v[: params.C, :] += np.eye(params.C)
    return sig, cd, v


def materialize_simt(params: SimTParams) -> np.ndarray:
    """Build the (C + n, C) row-stochastic transition matrix from U.

    V = class_dist * sigmoid(U) plus an identity prior on the closed
    block, then each row of V is normalized to sum 1.  The identity prior
    guarantees the closed-block diagonal dominates its row.
    """
    _, _, v = _sigmoid_scaled(params)
    return row_normalize(v)


def backprop_simt(params: SimTParams, dl_dt: np.ndarray) -> np.ndarray:
    """Chain a loss gradient dL/dT back to the free matrix U.

    With s_j the row sum of V and T = V / s_j, the exact chain rule is

        dL/dV[j,m] = (dL/dT[j,m] - sum_k dL/dT[j,k] T[j,k]) / s_j
        dL/dU[j,m] = dL/dV[j,m] * class_dist[m] * sig[j,m] * (1 - sig[j,m])
    """
    dl_dt = np.asarray(dl_dt, dtype=np.float64)
    sig, cd, v = _sigmoid_scaled(params)
    if dl_dt.shape != v.shape:
        raise ValueError(f"dl_dt must be {v.shape}, got {dl_dt.shape}")
    sums = v.sum(axis=1, keepdims=True)
    t = v / sums
    r = (dl_dt * t).sum(axis=1, keepdims=True)
    dl_dv = (dl_dt - r) / sums
    return dl_dv * cd[None, :] * sig * (1.0 - sig)


def volume_loss(t: np.ndarray) -> float:
    """Log-volume of the row simplex, log sqrt(det(T'T))."""
    return gram_logvol(t)


def grad_volume_loss(t: np.ndarray) -> np.ndarray:
    """Gradient of ``volume_loss`` with respect to T."""
    return grad_gram_logvol(t)


def anchor_loss(t: np.ndarray, anchors: AnchorSet) -> tuple[float, np.ndarray]:
    """Squared distance between T rows and their anchor posteriors.

    Plain sum over the present rows (no averaging); the gradient with
    respect to T is 2 (T - p) on present rows and zero elsewhere.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.shape != anchors.posteriors.shape:
        raise ValueError(
            f"T is {t.shape} but anchors are {anchors.posteriors.shape}")
    diff = np.where(anchors.present[:, None], t - anchors.posteriors, 0.0)
    loss = float(np.sum(diff * diff))
    return loss, 2.0 * diff


def materialize_weighting(params: WeightingParams) -> np.ndarray:
    """Build the weighting matrix u from free parameters W.

    Row j of u expresses "reconstruct T row j from the other rows": the
    diagonal is exactly -1 and the off-diagonal entries are a softmax of
    W's off-diagonal row, so they are positive and sum to one.  The
    diagonal is excluded from the softmax support outright rather than
    pinned with a large negative logit, which makes both invariants exact.
    """
    w = params.W
    k = w.shape[0]
    u = np.empty_like(w)
    idx = np.arange(k)
    for j in range(k):
        off = w[j, idx != j]
        z = np.exp(off - off.max())
        p = z / z.sum()
        _absorb_residue(p)
        row = np.empty(k)
        row[idx != j] = p
        row[j] = -1.0
        u[j] = row
    return u


def _absorb_residue(p: np.ndarray) -> None:
    """Nudge the largest entry of a probability vector until the exact
    (fsum) total is 1.0; at most a couple of ulps move."""
    top = int(np.argmax(p))
    p[top] = 1.0 - math.fsum(np.delete(p, top))
    for _ in range(64):
        r = math.fsum(p)
        if r == 1.0:
            return
        moved = p[top] + (1.0 - r)
        if moved == p[top]:  # correction below addition precision: step an ulp
            moved = np.nextafter(p[top], np.inf if r < 1.0 else -np.inf)
        p[top] = moved
    raise AssertionError("failed to normalize weighting row exactly")


def convex_inner_loss(u: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """||u T||_F^2 and its gradient with respect to the free matrix W.

    The inner player drives each row of u T toward zero; a row's
    contribution can only vanish if that T row is a convex combination of
    the others.  T is treated as a constant here.  The softmax Jacobian
    only needs u's off-diagonal probabilities, so the gradient is exact:

        dL/du = 2 (u T) T'
        dL/dW[j,b] = p_b * (g_b - sum_a p_a g_a)   (off-diagonal support)

    Diagonal entries of W carry no gradient (they are outside the
    softmax support).
    """
    u = np.asarray(u, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    k = u.shape[0]
    ut = u @ t
    loss = float(np.sum(ut * ut))
    g_u = 2.0 * ut @ t.T
    dl_dw = np.zeros_like(u)
    idx = np.arange(k)
    for j in range(k):
        mask = idx != j
        p = u[j, mask]
        g = g_u[j, mask]
        s = float(p @ g)
        dl_dw[j, mask] = p * (g - s)
    return loss, dl_dw


def convex_outer_loss(u: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """-||u T||_F^2 and its gradient with respect to T.

    The outer player maximizes ||u T||^2 (by minimizing its negative),
    pushing rows of T out of the convex hull of the other rows.  u is
    treated as a constant here; gradient is -2 u'(u T).
    """
    u = np.asarray(u, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    ut = u @ t
    loss = -float(np.sum(ut * ut))
    return loss, -2.0 * u.T @ ut


def init_simt_params(
    C: int, n: int, class_dist: np.ndarray, rng: np.random.Generator
) -> SimTParams:
    """Draw U from a zero-mean normal with std sqrt(2 / C)."""
    u = rng.normal(0.0, math.sqrt(2.0 / C), size=(C + n, C))
    return SimTParams(U=u, class_dist=np.asarray(class_dist, dtype=np.float64),
                      C=C, n=n)


def init_weighting_params(C: int, n: int) -> WeightingParams:
    """Uniform start: every off-diagonal softmax begins flat."""
    k = C + n
    return WeightingParams(W=np.full((k, k), 1.0 / (k - 1)))
