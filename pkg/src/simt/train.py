"""Training protocol: warm-up, extension, and the alternating step.

The optimizer is deliberately plain SGD with polynomial learning-rate
decay and two parameter groups — the hidden layer trains at ``base_lr``
while the output layer, the transition parameters U, and the weighting
parameters W train at ``head_lr`` — because exact, certifiable gradient
flow matters more here than convergence speed.  Each training step runs
the inner weighting minimization with the transition matrix held fixed,
then takes one descent step on everything else using the combined
objective

    L = L_LC + L_Aux + alpha * volume + beta * anchor + gamma * convex,

where the three regularizers reach only the transition parameters,
L_Aux reaches only the classifier, and L_LC reaches both.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from .linalg import SingularGram
from .model import (
    ClassifierGrads,
    ClassifierParams,
    NumericalUnderflow,
    PosteriorBatch,
    aux_loss,
    backward,
    corrected_loss,
    detect_anchors,
    forward,
    init_classifier,
    select_confident,
    self_training_loss,
)
from .serialize import dump_json, load_json
from .synth import EmptyInput, SyntheticDataset, class_dist, simt_error
from .transition import (
    SimTParams,
    WeightingParams,
    anchor_loss,
    backprop_simt,
    convex_inner_loss,
    convex_outer_loss,
    grad_volume_loss,
    init_simt_params,
    init_weighting_params,
    materialize_simt,
    materialize_weighting,
    volume_loss,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyper-parameters for one training run.

    ``use_aux`` exists so the auxiliary loss can be ablated outright;
    setting ``lam`` to zero only removes its second (masked) term, the
    confident-set cross-entropy survives.  ``lc_t_freeze_iters`` stops
    the corrected loss's gradient to the transition matrix for the
    first so-many iterations (0 trains jointly from the start).
    """

    C: int = 3
    n: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1
    lam: float = 0.1
    tau_high: float = 0.8
    tau_low: float = 0.2
    base_lr: float = 6e-4
    head_lr: float = 6e-3
    lr_power: float = 0.9
    warmup_iters: int = 2000
    train_iters: int = 20000
    batch_size: int = 256
    inner_u_steps: int = 1
    seed: int = 0
    hidden_dim: int = 32
    lc_t_freeze_iters: int = 0
    use_aux: bool = True

    def __post_init__(self):
        if self.C < 2 or self.n < 1:
            raise ValueError("need C >= 2 closed classes and n >= 1 open rows")
        for name in ("alpha", "beta", "gamma", "lam"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if not (0.0 < self.tau_low < self.tau_high < 1.0):
            raise ValueError("need 0 < tau_low < tau_high < 1")
        if self.base_lr <= 0.0 or self.head_lr < self.base_lr:
            raise ValueError("need 0 < base_lr <= head_lr")
        if self.lr_power < 0.0:
            raise ValueError("lr_power must be nonnegative")
        if self.warmup_iters < 0 or self.inner_u_steps < 0:
            raise ValueError("warmup_iters and inner_u_steps must be >= 0")
        if self.train_iters < 1 or self.batch_size < 1:
            raise ValueError("train_iters and batch_size must be positive")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0 (0 means single affine)")
        if self.lc_t_freeze_iters < 0:
            raise ValueError("lc_t_freeze_iters must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class MetricsRecord:
    """One evaluation snapshot; every field must be finite.

    Loss terms are computed on the held-out set with the current
    parameters; ``lr`` is the scheduled hidden-layer rate at this
    iteration (the head rate is head_lr / base_lr times it).
    """

    iteration: int
    loss_lc: float
    loss_aux: float
    loss_volume: float
    loss_anchor: float
    loss_convex: float
    closed_mae: float
    open_mae: float
    clean_acc: float
    open_precision: float
    open_recall: float
    open_f1: float
    lr: float

    FIELDS = (
        "iteration", "loss_lc", "loss_aux", "loss_volume", "loss_anchor",
        "loss_convex", "closed_mae", "open_mae", "clean_acc",
        "open_precision", "open_recall", "open_f1", "lr",
    )

    def __post_init__(self):
        for name in self.FIELDS:
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"metrics field {name} is not finite")

    def as_row(self) -> list:
        return [getattr(self, name) for name in self.FIELDS]


@dataclass
class TrainState:
    """Everything the training loop mutates, plus the frozen pieces.

    ``pinned_t`` is a diagnostic hook: when set, the transition matrix
    is taken verbatim from it and the transition/weighting parameters
    are left untouched (used to reduce a step to plain self-training).
    It is transient and never checkpointed.
    """

    classifier: ClassifierParams
    simt: SimTParams
    weighting: WeightingParams
    w_fixed: ClassifierParams
    iteration: int
    rng: np.random.Generator
    config: TrainConfig
    pinned_t: np.ndarray | None = None


def poly_lr(base: float, iteration: int, max_iter: int, power: float) -> float:
    """Polynomial decay: base * (1 - iteration / max_iter) ** power."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


def _apply_classifier_update(
    params: ClassifierParams, grads: ClassifierGrads,
    lr_hidden: float, lr_out: float,
) -> None:
    if params.w_hidden is not None:
        params.w_hidden -= lr_hidden * grads.w_hidden
        params.b_hidden -= lr_hidden * grads.b_hidden
    params.w_out -= lr_out * grads.w_out
    params.b_out -= lr_out * grads.b_out


def _self_training_run(
    features: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    out_dim: int,
    total_iters: int,
    rng: np.random.Generator,
    loss_sink: list | None = None,
) -> ClassifierParams:
    if features.shape[0] == 0:
        raise EmptyInput("cannot train on an empty dataset")
    params = init_classifier(features.shape[1], config.hidden_dim, out_dim, rng)
    for it in range(total_iters):
        idx = rng.integers(0, features.shape[0], size=config.batch_size)
        x = features[idx]
        post = forward(params, x)
        loss, dl_dlogits = self_training_loss(post, labels[idx])
        if loss_sink is not None:
            loss_sink.append(loss)
        grads = backward(params, x, dl_dlogits)
        lr_h = poly_lr(config.base_lr, it, max(total_iters, 1), config.lr_power)
        lr_o = poly_lr(config.head_lr, it, max(total_iters, 1), config.lr_power)
        _apply_classifier_update(params, grads, lr_h, lr_o)
    return params


def warmup(
    dataset: SyntheticDataset, config: TrainConfig,
    loss_sink: list | None = None,
) -> ClassifierParams:
    """Train the C-way model on pseudo labels; frozen afterwards.

    With warmup_iters = 0 this returns the initialization unchanged.
    The per-step training loss can be captured through ``loss_sink``.
    """
    rng = np.random.default_rng([config.seed, 0])
    return _self_training_run(
        dataset.features, dataset.pseudo_labels, config, config.C,
        config.warmup_iters, rng, loss_sink)


def extend_classifier(
    warmup_params: ClassifierParams, n: int, seed: int
) -> ClassifierParams:
    """Widen the output layer from C to C+n classes.

    The first C output columns and biases are copied verbatim, so the
    extended model restricted to its first C logits equals the warm-up
    model exactly at the moment of extension.  The n new columns come
    from a zero-mean normal with standard deviation 1e-2, keeping open
    posteriors near uniform small mass initially.
    """
    rng = np.random.default_rng([seed, 1])
    c = warmup_params.out_dim
    h = warmup_params.w_out.shape[0]
    w_out = np.empty((h, c + n))
    w_out[:, :c] = warmup_params.w_out
    w_out[:, c:] = rng.normal(0.0, 1e-2, size=(h, n))
    b_out = np.empty(c + n)
    b_out[:c] = warmup_params.b_out
    b_out[c:] = rng.normal(0.0, 1e-2, size=n)
    return ClassifierParams(
        w_hidden=None if warmup_params.w_hidden is None
        else warmup_params.w_hidden.copy(),
        b_hidden=None if warmup_params.b_hidden is None
        else warmup_params.b_hidden.copy(),
        w_out=w_out,
        b_out=b_out,
    )


def init_training(dataset: SyntheticDataset, config: TrainConfig) -> TrainState:
    """Warm up, extend, and set up all trainable state.

    Separate deterministic RNG streams: [seed, 0] warm-up init and
    batches, [seed, 1] extension draw, [seed, 2] transition init,
    [seed, 3] training-loop batches.
    """
    w_fixed = warmup(dataset, config)
    classifier = extend_classifier(w_fixed, config.n, config.seed)
    cd = class_dist(dataset.pseudo_labels, config.C)
    simt = init_simt_params(
        config.C, config.n, cd, np.random.default_rng([config.seed, 2]))
    weighting = init_weighting_params(config.C, config.n)
    return TrainState(
        classifier=classifier, simt=simt, weighting=weighting,
        w_fixed=w_fixed, iteration=0,
        rng=np.random.default_rng([config.seed, 3]), config=config)


def _occurring_classes(
    pseudo_labels: np.ndarray, post: PosteriorBatch, c: int, n: int
) -> np.ndarray:
    """Bool mask over C+n rows: closed classes present in the batch's
    pseudo labels, open slots hit by the extended argmax."""
    mask = np.zeros(c + n, dtype=bool)
    mask[np.unique(pseudo_labels) - 1] = True
    arg = np.unique(post.probs.argmax(axis=1))
    mask[arg[arg >= c]] = True
    return mask


def train_step(
    state: TrainState, x: np.ndarray, pseudo_labels: np.ndarray
) -> TrainState:
    """One alternating optimization step on a batch; mutates ``state``.

    Numerical failures carry the offending iteration in their message.
    """
    cfg = state.config
    it = state.iteration
    try:
        lr_hidden = poly_lr(cfg.base_lr, it, cfg.train_iters, cfg.lr_power)
        lr_head = poly_lr(cfg.head_lr, it, cfg.train_iters, cfg.lr_power)
        pinned = state.pinned_t is not None
        t = state.pinned_t if pinned else materialize_simt(state.simt)

        if not pinned:
            for _ in range(cfg.inner_u_steps):
                u = materialize_weighting(state.weighting)
                _, dl_dw = convex_inner_loss(u, t)
                state.weighting.W -= lr_head * dl_dw

        post = forward(state.classifier, x)
        post_fixed = forward(state.w_fixed, x)

        _, dl_dlogits_lc, dl_dt_lc = corrected_loss(post, t, pseudo_labels)

        sets = select_confident(post_fixed, post, cfg.tau_high, cfg.tau_low)
        if cfg.use_aux and (sets.closed or sets.open):
            _, dl_dlogits_aux = aux_loss(post, sets, cfg.lam, cfg.C)
        else:
            dl_dlogits_aux = np.zeros_like(post.logits)

        if not pinned:
            occurring = _occurring_classes(pseudo_labels, post, cfg.C, cfg.n)
            anchors = detect_anchors(post, post_fixed, occurring)
            _, dl_dt_anchor = anchor_loss(t, anchors)
            u = materialize_weighting(state.weighting)
            _, dl_dt_convex = convex_outer_loss(u, t)
            dl_dt = (cfg.alpha * grad_volume_loss(t)
                     + cfg.beta * dl_dt_anchor
                     + cfg.gamma * dl_dt_convex)
            if it >= cfg.lc_t_freeze_iters:
                dl_dt = dl_dt + dl_dt_lc
            state.simt.U -= lr_head * backprop_simt(state.simt, dl_dt)

        grads = backward(state.classifier, x, dl_dlogits_lc + dl_dlogits_aux)
        _apply_classifier_update(state.classifier, grads, lr_hidden, lr_head)
        state.iteration = it + 1
        return state
    except (NumericalUnderflow, SingularGram) as exc:
        raise type(exc)(f"iteration {it}: {exc}") from exc


def evaluate(state: TrainState, heldout: SyntheticDataset) -> MetricsRecord:
    """Pure evaluation snapshot on a held-out set.

    Clean accuracy is measured on instances whose clean label is a
    closed class, predicting the argmax over the first C posterior
    entries.  Open-set detection treats an extended argmax beyond C as
    positive and a clean label beyond C as ground truth; degenerate
    precision/recall ratios (0/0) are reported as 0.
    """
    if heldout.n == 0:
        raise EmptyInput("held-out set is empty")
    cfg = state.config
    pinned = state.pinned_t is not None
    t = state.pinned_t if pinned else materialize_simt(state.simt)
    x = heldout.features
    post = forward(state.classifier, x)
    post_fixed = forward(state.w_fixed, x)

    l_lc, _, _ = corrected_loss(post, t, heldout.pseudo_labels)
    sets = select_confident(post_fixed, post, cfg.tau_high, cfg.tau_low)
    if cfg.use_aux and (sets.closed or sets.open):
        l_aux, _ = aux_loss(post, sets, cfg.lam, cfg.C)
    else:
        l_aux = 0.0
    if pinned:
        l_vol = l_anchor = l_convex = 0.0
    else:
        l_vol = volume_loss(t)
        occurring = _occurring_classes(heldout.pseudo_labels, post, cfg.C, cfg.n)
        anchors = detect_anchors(post, post_fixed, occurring)
        l_anchor, _ = anchor_loss(t, anchors)
        l_convex, _ = convex_outer_loss(materialize_weighting(state.weighting), t)

    closed_mask = heldout.clean_labels <= cfg.C
    pred_closed = post.probs[:, :cfg.C].argmax(axis=1) + 1
    if closed_mask.any():
        acc = float(np.mean(pred_closed[closed_mask]
                            == heldout.clean_labels[closed_mask]))
    else:
        acc = 0.0

    pred_open = post.probs.argmax(axis=1) + 1 > cfg.C
    true_open = heldout.clean_labels > cfg.C
    tp = int(np.sum(pred_open & true_open))
    fp = int(np.sum(pred_open & ~true_open))
    fn = int(np.sum(~pred_open & true_open))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    err = simt_error(t, heldout.spec.t_true)
    lr = poly_lr(cfg.base_lr, min(state.iteration, cfg.train_iters),
                 cfg.train_iters, cfg.lr_power)
    return MetricsRecord(
        iteration=state.iteration, loss_lc=l_lc, loss_aux=l_aux,
        loss_volume=l_vol, loss_anchor=l_anchor, loss_convex=l_convex,
        closed_mae=err.closed_mae, open_mae=err.open_mae, clean_acc=acc,
        open_precision=precision, open_recall=recall, open_f1=f1, lr=lr)


def run_training(
    dataset: SyntheticDataset,
    config: TrainConfig,
    heldout: SyntheticDataset | None = None,
    eval_every: int = 0,
    metrics_sink: list | None = None,
    state: TrainState | None = None,
) -> TrainState:
    """Drive train_step from the current iteration to train_iters.

    Pass an existing ``state`` to resume; otherwise warm-up, extension,
    and initialization run first.  With ``eval_every`` > 0 and a
    held-out set, a MetricsRecord is appended to ``metrics_sink`` every
    so-many iterations and at the final one.
    """
    if dataset.n == 0:
        raise EmptyInput("cannot train on an empty dataset")
    if state is None:
        state = init_training(dataset, config)
    x, y = dataset.features, dataset.pseudo_labels
    while state.iteration < config.train_iters:
        # An interrupt mid-step must not leave the stream ahead of the
        # iteration counter, or a resumed run would draw different
        # batches than an uninterrupted one.
        rng_before = state.rng.bit_generator.state
        try:
            idx = state.rng.integers(0, dataset.n, size=config.batch_size)
            state = train_step(state, x[idx], y[idx])
        except KeyboardInterrupt:
            state.rng.bit_generator.state = rng_before
            raise
        at_end = state.iteration == config.train_iters
        if (eval_every > 0 and heldout is not None
                and (state.iteration % eval_every == 0 or at_end)):
            record = evaluate(state, heldout)
            if metrics_sink is not None:
                metrics_sink.append(record)
    return state


def train_naive(
    dataset: SyntheticDataset, config: TrainConfig,
    loss_sink: list | None = None,
) -> ClassifierParams:
    """Plain self-training on pseudo labels, same total budget.

    Runs warmup_iters + train_iters steps of the self-training loss on
    a C-way model with one polynomial schedule over the whole budget —
    the no-correction baseline the corrected run is compared against.
    """
    rng = np.random.default_rng([config.seed, 0])
    return _self_training_run(
        dataset.features, dataset.pseudo_labels, config, config.C,
        config.warmup_iters + config.train_iters, rng, loss_sink)


def train_clean_oracle(
    dataset: SyntheticDataset, config: TrainConfig
) -> ClassifierParams:
    """Upper bound: same budget trained on true closed-class labels."""
    mask = dataset.clean_labels <= config.C
    rng = np.random.default_rng([config.seed, 0])
    return _self_training_run(
        dataset.features[mask], dataset.clean_labels[mask], config,
        config.C, config.warmup_iters + config.train_iters, rng)


def closed_accuracy(
    params: ClassifierParams, heldout: SyntheticDataset, c: int
) -> float:
    """Accuracy over held-out closed-class instances, first-c argmax."""
    mask = heldout.clean_labels <= c
    if not mask.any():
        raise EmptyInput("held-out set has no closed-class instances")
    post = forward(params, heldout.features[mask])
    pred = post.probs[:, :c].argmax(axis=1) + 1
    return float(np.mean(pred == heldout.clean_labels[mask]))


def min_convex_loss(t: np.ndarray, steps: int = 500, lr: float = 0.5) -> float:
    """Minimize the inner weighting loss from a fresh start.

    Gradient descent on W for ``steps`` iterations at a fixed step
    size; returns the final value of convex_inner_loss, a measure of
    how far T is from having convex-dependent rows (0 = dependent).
    """
    c = t.shape[1]
    n = t.shape[0] - c
    w = init_weighting_params(c, n)
    for _ in range(steps):
        u = materialize_weighting(w)
        _, dl_dw = convex_inner_loss(u, t)
        w.W -= lr * dl_dw
    return convex_inner_loss(materialize_weighting(w), t)[0]


def save_checkpoint(state: TrainState, path) -> None:
    """Single JSON document: config, iteration, RNG state, parameters.

    Floats are written as decimal text that round-trips float64
    exactly, so resuming is bit-identical.  ``pinned_t`` is a transient
    diagnostic and is not saved.
    """
    def arrays(p: ClassifierParams) -> dict:
        return {
            "w_hidden": None if p.w_hidden is None else p.w_hidden.tolist(),
            "b_hidden": None if p.b_hidden is None else p.b_hidden.tolist(),
            "w_out": p.w_out.tolist(),
            "b_out": p.b_out.tolist(),
        }

    doc = {
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "classifier": arrays(state.classifier),
        "w_fixed": arrays(state.w_fixed),
        "simt_u": state.simt.U.tolist(),
        "simt_class_dist": state.simt.class_dist.tolist(),
        "weighting_w": state.weighting.W.tolist(),
    }
    dump_json(doc, path)


def load_checkpoint(path) -> TrainState:
    doc = load_json(path)
    config = TrainConfig.from_dict(doc["config"])

    def params(d: dict) -> ClassifierParams:
        return ClassifierParams(
            w_hidden=None if d["w_hidden"] is None
            else np.asarray(d["w_hidden"], dtype=np.float64),
            b_hidden=None if d["b_hidden"] is None
            else np.asarray(d["b_hidden"], dtype=np.float64),
            w_out=np.asarray(d["w_out"], dtype=np.float64),
            b_out=np.asarray(d["b_out"], dtype=np.float64),
        )

    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    return TrainState(
        classifier=params(doc["classifier"]),
        simt=SimTParams(U=np.asarray(doc["simt_u"], dtype=np.float64),
                        class_dist=np.asarray(doc["simt_class_dist"],
                                              dtype=np.float64),
                        C=config.C, n=config.n),
        weighting=WeightingParams(W=np.asarray(doc["weighting_w"],
                                               dtype=np.float64)),
        w_fixed=params(doc["w_fixed"]),
        iteration=int(doc["iteration"]),
        rng=rng,
        config=config,
    )
