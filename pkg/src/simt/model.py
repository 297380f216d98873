"""Small dense classifier and the instance-level losses.

Forward is affine -> ReLU -> affine -> softmax (or a single affine when
``hidden_dim`` is zero); every backward pass is hand-derived and
certified against the central-difference oracle.

Label conventions used across the package: class labels are 1-based
(closed-set classes are 1..C, open-set slots C+1..C+n), instance indices
within a batch are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .transition import AnchorSet

# Corrected-loss probabilities below this are treated as a numerical
# collapse rather than silently producing inf.
UNDERFLOW_FLOOR = 1e-300


class NumericalUnderflow(Exception):
    """A corrected probability underflowed to (numerically) zero."""


@dataclass
class ClassifierParams:
    """Weights for the classifier; hidden fields are None when h == 0.

    w_hidden : (d, h) or None
    b_hidden : (h,) or None
    w_out    : (h, k) with h replaced by d when there is no hidden layer
    b_out    : (k,)
    """

    w_hidden: np.ndarray | None
    b_hidden: np.ndarray | None
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.w_out.shape[1]

    @property
    def in_dim(self) -> int:
        return self.w_hidden.shape[0] if self.w_hidden is not None else self.w_out.shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            w_hidden=None if self.w_hidden is None else self.w_hidden.copy(),
            b_hidden=None if self.b_hidden is None else self.b_hidden.copy(),
            w_out=self.w_out.copy(),
            b_out=self.b_out.copy(),
        )


@dataclass
class ClassifierGrads:
    """Parameter gradients, structurally parallel to ClassifierParams."""

    w_hidden: np.ndarray | None
    b_hidden: np.ndarray | None
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass
class PosteriorBatch:
    """Softmax probabilities plus the logits they came from, both (N, K)."""

    probs: np.ndarray
    logits: np.ndarray


@dataclass
class ConfidentSets:
    """Confidently pseudo-labeled instances, disjoint by construction.

    closed : list of (instance index, label in 1..C)
    open   : list of (instance index, label in C+1..C+n)
    """

    closed: list[tuple[int, int]]
    open: list[tuple[int, int]]


def init_classifier(
    d: int, h: int, k: int, rng: np.random.Generator
) -> ClassifierParams:
    """He-style normal init; h == 0 builds a single affine layer."""
    if h == 0:
        return ClassifierParams(
            w_hidden=None,
            b_hidden=None,
            w_out=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, k)),
            b_out=np.zeros(k),
        )
    return ClassifierParams(
        w_hidden=rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h)),
        b_hidden=np.zeros(h),
        w_out=rng.normal(0.0, np.sqrt(2.0 / h), size=(h, k)),
        b_out=np.zeros(k),
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ClassifierParams, x: np.ndarray) -> PosteriorBatch:
    """Posterior batch for inputs x of shape (N, d)."""
    x = np.asarray(x, dtype=np.float64)
    if params.w_hidden is None:
        logits = x @ params.w_out + params.b_out
    else:
        hidden = np.maximum(x @ params.w_hidden + params.b_hidden, 0.0)
        logits = hidden @ params.w_out + params.b_out
    return PosteriorBatch(probs=_softmax(logits), logits=logits)


def backward(
    params: ClassifierParams, x: np.ndarray, dl_dlogits: np.ndarray
) -> ClassifierGrads:
    """Parameter gradients given dL/dlogits; activations are recomputed.

    ReLU uses the zero subgradient at exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if params.w_hidden is None:
        return ClassifierGrads(
            w_hidden=None,
            b_hidden=None,
            w_out=x.T @ dl_dlogits,
            b_out=dl_dlogits.sum(axis=0),
        )
    pre = x @ params.w_hidden + params.b_hidden
    hidden = np.maximum(pre, 0.0)
    d_hidden = dl_dlogits @ params.w_out.T
    d_pre = d_hidden * (pre > 0.0)
    return ClassifierGrads(
        w_hidden=x.T @ d_pre,
        b_hidden=d_pre.sum(axis=0),
        w_out=hidden.T @ dl_dlogits,
        b_out=dl_dlogits.sum(axis=0),
    )


def _dlogits_from_dprobs(probs: np.ndarray, dl_dprobs: np.ndarray) -> np.ndarray:
    # Softmax Jacobian: dL/dz = p * (g - sum_k g_k p_k)
    inner = (dl_dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dl_dprobs - inner)


def corrected_loss(
    post: PosteriorBatch, t: np.ndarray, pseudo_labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Noise-corrected negative log likelihood.

    The classifier's clean posterior is pushed through the transition
    matrix to predict the observed pseudo label:

        L = mean_i -log( (p_i @ T)[y_i] )

    Returns (loss, dL/dlogits, dL/dT); gradients flow to both the
    classifier and T.

    Raises
    ------
    NumericalUnderflow
        If any corrected probability falls below 1e-300.
    """
    probs = post.probs
    n, k = probs.shape
    t = np.asarray(t, dtype=np.float64)
    if t.shape[0] != k:
        raise ValueError(f"T has {t.shape[0]} rows but posteriors have {k} classes")
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("one pseudo label per instance required")
    if np.any(labels < 1) or np.any(labels > t.shape[1]):
        raise ValueError("pseudo labels must lie in 1..C")
    cols = labels - 1
    q = probs @ t
    picked = q[np.arange(n), cols]
    if np.any(picked < UNDERFLOW_FLOOR):
        raise NumericalUnderflow("corrected probability underflowed 1e-300")
    loss = float(np.mean(-np.log(picked)))
    # dL/dq is -1/(N q_y) at the labeled column of each row, zero elsewhere.
    dl_dq = np.zeros_like(q)
    dl_dq[np.arange(n), cols] = -1.0 / (n * picked)
    dl_dprobs = dl_dq @ t.T
    dl_dlogits = _dlogits_from_dprobs(probs, dl_dprobs)
    dl_dt = probs.T @ dl_dq
    return loss, dl_dlogits, dl_dt


def self_training_loss(
    post: PosteriorBatch, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against the given (pseudo) labels.

    Returns (loss, dL/dlogits) with the standard (p - onehot)/N gradient.
    """
    probs = post.probs
    n, k = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 1) or np.any(labels > k):
        raise ValueError("labels must lie in 1..K")
    cols = labels - 1
    picked = probs[np.arange(n), cols]
    if np.any(picked < UNDERFLOW_FLOOR):
        raise NumericalUnderflow("posterior underflowed 1e-300")
    loss = float(np.mean(-np.log(picked)))
    dl = probs.copy()
    dl[np.arange(n), cols] -= 1.0
    return loss, dl / n


def detect_anchors(
    post_w: PosteriorBatch, post_fixed: PosteriorBatch, occurring: np.ndarray
) -> AnchorSet:
    """Pick one anchor instance per occurring class.

    The anchor for class c is the instance the *current* model is most
    confident about (argmax over the batch of post_w column c, first
    maximum wins on ties); the anchor's stored posterior comes from the
    *frozen warm-up* model, which estimated p(pseudo | x) directly.
    """
    probs_w = post_w.probs
    probs_fixed = post_fixed.probs
    occurring = np.asarray(occurring, dtype=bool)
    k = probs_w.shape[1]
    c = probs_fixed.shape[1]
    if occurring.shape != (k,):
        raise ValueError("occurring mask must have one entry per model class")
    posteriors = np.zeros((k, c))
    for cls in np.nonzero(occurring)[0]:
        idx = int(np.argmax(probs_w[:, cls]))
        posteriors[cls] = probs_fixed[idx]
    return AnchorSet(posteriors=posteriors, present=occurring.copy())


def select_confident(
    post_fixed: PosteriorBatch,
    post_w: PosteriorBatch,
    tau_high: float,
    tau_low: float,
) -> ConfidentSets:
    """Split a batch into confidently-closed and confidently-open instances.

    Closed: warm-up confidence above tau_high, labeled by the warm-up
    argmax.  Open: warm-up confidence below tau_low while the extended
    model's argmax lands on an open slot, labeled by that slot.  The two
    conditions are mutually exclusive because tau_low < tau_high.
    """
    if not tau_low < tau_high:
        raise ValueError("need tau_low < tau_high")
    conf_fixed = post_fixed.probs.max(axis=1)
    arg_fixed = post_fixed.probs.argmax(axis=1)
    arg_w = post_w.probs.argmax(axis=1)
    c = post_fixed.probs.shape[1]
    closed = [
        (int(i), int(arg_fixed[i]) + 1)
        for i in np.nonzero(conf_fixed > tau_high)[0]
    ]
    open_mask = (conf_fixed < tau_low) & (arg_w + 1 > c)
    open_ = [(int(i), int(arg_w[i]) + 1) for i in np.nonzero(open_mask)[0]]
    return ConfidentSets(closed=closed, open=open_)


def aux_loss(
    post_w: PosteriorBatch,
    sets: ConfidentSets,
    lam: float,
    n_closed: int,
) -> tuple[float, np.ndarray]:
    """Confident-set cross-entropy plus the masked second-best term.

    Term 1 is the mean cross-entropy of the extended model against the
    labels of the confident closed and open instances.  Term 2 (weighted
    by ``lam``) re-normalizes each confident closed instance's logits
    with its own label removed from the support and asks the best open
    slot to win that reduced contest, which keeps the open slots in a
    competitive range.  Empty sets contribute exactly zero.

    Returns (loss, dL/dlogits).
    """
    probs = post_w.probs
    logits = post_w.logits
    n, k = probs.shape
    if not 0 < n_closed < k:
        raise ValueError("need 0 < C < K (at least one open slot)")
    dl = np.zeros_like(logits)
    loss = 0.0

    # instances are unique across closed + open (the sets are disjoint
    # and each is index-unique), so fancy-indexed += below is safe
    pairs = sets.closed + sets.open
    if pairs:
        m = len(pairs)
        rows = np.array([i for i, _ in pairs])
        cols = np.array([label - 1 for _, label in pairs])
        p = probs[rows, cols]
        if np.any(p < UNDERFLOW_FLOOR):
            raise NumericalUnderflow("confident-set posterior underflowed")
        loss += float(np.sum(-np.log(p))) / m
        dl[rows] += probs[rows] / m
        dl[rows, cols] -= 1.0 / m
    if lam != 0.0 and sets.closed:
        m2 = len(sets.closed)
        rows = np.array([i for i, _ in sets.closed])
        own = np.array([label - 1 for _, label in sets.closed])
        z = logits[rows]  # advanced indexing: already a copy
        z[np.arange(m2), own] = -np.inf
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        masked = e / e.sum(axis=1, keepdims=True)
        # best open slot under the full posterior; masking a closed
        # label does not change which open slot wins
        target = n_closed + probs[rows, n_closed:].argmax(axis=1)
        p = masked[np.arange(m2), target]
        if np.any(p < UNDERFLOW_FLOOR):
            raise NumericalUnderflow("masked posterior underflowed")
        loss += lam * float(np.sum(-np.log(p))) / m2
        g = masked
        g[np.arange(m2), target] -= 1.0
        dl[rows] += lam * g / m2
    return float(loss), dl
