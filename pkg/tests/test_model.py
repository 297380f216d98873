"""Classifier and loss tests: frozen values, reductions, fd certification."""

import math
from dataclasses import replace

import numpy as np
import pytest

from simt.linalg import fd_gradient, max_rel_error
from simt.model import (
    ClassifierParams,
    ConfidentSets,
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


def _post(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return PosteriorBatch(probs=e / e.sum(axis=1, keepdims=True), logits=logits)


def _safe_instance(rng, n=6, d=4, h=3, k=4):
    """Random params/inputs kept away from ReLU kinks so fd probes are clean."""
    while True:
        params = init_classifier(d, h, k, rng)
        params.b_hidden = rng.normal(size=h) * 0.1
        x = rng.normal(size=(n, d))
        if h == 0:
            return params, x
        pre = x @ params.w_hidden + params.b_hidden
        if np.min(np.abs(pre)) > 1e-3:
            return params, x


def _noise_band_free(*arrays, hi=3e-5):
    """True when no gradient entry sits in the fd noise band.

    Central differences at eps = 1e-5 resolve slopes down to roughly 1e-11
    in absolute terms; entries between exact zero and ``hi`` would compare
    noise against signal, so instances containing them are redrawn.
    """
    for a in arrays:
        mag = np.abs(np.asarray(a))
        if np.any((mag > 1e-16) & (mag < hi)):
            return False
    return True


class TestForwardBackward:
    def test_zero_weights_give_uniform(self):
        params = ClassifierParams(None, None, np.zeros((3, 4)), np.zeros(4))
        post = forward(params, np.ones((2, 3)))
        np.testing.assert_allclose(post.probs, 0.25, atol=1e-15)

    def test_single_affine_path(self):
        params = ClassifierParams(None, None, np.array([[40.0, 0.0]]), np.zeros(2))
        post = forward(params, np.array([[1.0]]))
        assert post.probs[0, 0] > 1.0 - 1e-12

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(0)
        params, x = _safe_instance(rng)
        post = forward(params, x)
        np.testing.assert_allclose(post.probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(post.probs > 0.0)

    def test_backward_matches_fd_hidden(self):
        rng = np.random.default_rng(1)
        while True:
            params, x = _safe_instance(rng)
            labels = rng.integers(1, 5, size=x.shape[0])
            _, dlogits = self_training_loss(forward(params, x), labels)
            grads = backward(params, x, dlogits)
            if _noise_band_free(grads.w_hidden, grads.b_hidden,
                                grads.w_out, grads.b_out):
                break

        def loss_of(p):
            return self_training_loss(forward(p, x), labels)[0]
        for name in ("w_hidden", "b_hidden", "w_out", "b_out"):
            numeric = fd_gradient(
                lambda m, _n=name: loss_of(replace(params, **{_n: m})),
                getattr(params, name).reshape(getattr(params, name).shape),
            )
            assert max_rel_error(getattr(grads, name), numeric) < 1e-6, name

    def test_backward_matches_fd_single_affine(self):
        rng = np.random.default_rng(2)
        params = init_classifier(3, 0, 3, rng)
        x = rng.normal(size=(5, 3))
        labels = rng.integers(1, 4, size=5)
        _, dlogits = self_training_loss(forward(params, x), labels)
        grads = backward(params, x, dlogits)
        numeric = fd_gradient(
            lambda m: self_training_loss(forward(replace(params, w_out=m), x), labels)[0],
            params.w_out,
        )
        assert max_rel_error(grads.w_out, numeric) < 1e-6


class TestCorrectedLoss:
    def test_hand_value_log_six(self):
        # One-hot posterior on class 1 pushed through T row (5/6, 1/6) and
        # scored against pseudo label 2: loss is -log(1/6).
        post = _post([[500.0, 0.0]])
        t = np.array([[5 / 6, 1 / 6], [1 / 6, 5 / 6]])
        loss, _, _ = corrected_loss(post, t, np.array([2]))
        assert loss == pytest.approx(math.log(6.0), rel=1e-12)

    def test_identity_t_equals_self_training(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = rng.normal(size=(7, 4)) * 2.0
            post = _post(logits)
            labels = rng.integers(1, 5, size=7)
            lc, d_lc, _ = corrected_loss(post, np.eye(4), labels)
            ls, d_ls = self_training_loss(post, labels)
            assert abs(lc - ls) <= 1e-12
            np.testing.assert_allclose(d_lc, d_ls, atol=1e-14)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            post = _post(rng.normal(size=(5, 5)) * 3.0)
            t = rng.dirichlet(np.ones(3), size=5)
            labels = rng.integers(1, 4, size=5)
            loss, _, _ = corrected_loss(post, t, labels)
            assert loss >= 0.0

    def test_underflow_raises(self):
        post = _post([[0.0, 0.0]])
        t = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(NumericalUnderflow):
            corrected_loss(post, t, np.array([2]))

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        from simt.transition import SimTParams, backprop_simt, materialize_simt

        checked = 0
        while checked < 10:
            c, n_open = 3, 2
            params, x = _safe_instance(rng, n=5, d=4, h=3, k=c + n_open)
            labels = rng.integers(1, c + 1, size=5)
            sp = SimTParams(U=rng.normal(size=(c + n_open, c)),
                            class_dist=np.full(c, 1 / c), C=c, n=n_open)
            t = materialize_simt(sp)

            post = forward(params, x)
            _, dlogits, dt = corrected_loss(post, t, labels)
            grads = backward(params, x, dlogits)
            analytic_u_probe = backprop_simt(sp, dt)
            if not _noise_band_free(grads.w_out, analytic_u_probe):
                continue
            checked += 1
            numeric_w = fd_gradient(
                lambda m: corrected_loss(forward(replace(params, w_out=m), x), t, labels)[0],
                params.w_out,
            )
            assert max_rel_error(grads.w_out, numeric_w) < 1e-6

            analytic_u = analytic_u_probe
            numeric_u = fd_gradient(
                lambda u: corrected_loss(
                    post, materialize_simt(
                        SimTParams(U=u, class_dist=sp.class_dist, C=c, n=n_open)),
                    labels)[0],
                sp.U,
            )
            assert max_rel_error(analytic_u, numeric_u) < 1e-6


class TestSelfTrainingLoss:
    def test_uniform_hand_value(self):
        post = _post(np.zeros((3, 4)))
        loss, _ = self_training_loss(post, np.array([1, 2, 3]))
        assert loss == pytest.approx(math.log(4.0), rel=1e-12)

    def test_confident_correct_is_small(self):
        post = _post([[60.0, 0.0, 0.0]])
        loss, _ = self_training_loss(post, np.array([1]))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_gradient_rows_sum_to_zero(self):
        rng = np.random.default_rng(6)
        post = _post(rng.normal(size=(4, 3)))
        _, d = self_training_loss(post, rng.integers(1, 4, size=4))
        np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-15)


class TestDetectAnchors:
    def test_first_maximum_wins_ties(self):
        # Column 0 confidences (0.2, 0.9, 0.9): instance 1 is the anchor.
        probs_w = np.array([[0.2, 0.8], [0.9, 0.1], [0.9, 0.1]])
        post_w = PosteriorBatch(probs=probs_w, logits=np.log(probs_w))
        fixed = np.array([[0.3, 0.7], [0.6, 0.4], [0.1, 0.9]])
        post_fixed = PosteriorBatch(probs=fixed, logits=np.log(fixed))
        anchors = detect_anchors(post_w, post_fixed, np.array([True, False]))
        assert anchors.present.tolist() == [True, False]
        np.testing.assert_array_equal(anchors.posteriors[0], fixed[1])

    def test_absent_classes_masked(self):
        rng = np.random.default_rng(7)
        probs = rng.dirichlet(np.ones(4), size=6)
        post = PosteriorBatch(probs=probs, logits=np.log(probs))
        fixed_p = rng.dirichlet(np.ones(2), size=6)
        fixed = PosteriorBatch(probs=fixed_p, logits=np.log(fixed_p))
        anchors = detect_anchors(post, fixed, np.array([True, False, True, False]))
        assert anchors.present.tolist() == [True, False, True, False]
        np.testing.assert_array_equal(anchors.posteriors[1], np.zeros(2))

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(8)
        probs_w = rng.dirichlet(np.ones(5), size=9)
        probs_f = rng.dirichlet(np.ones(3), size=9)
        occurring = np.array([True, True, False, True, True])
        a1 = detect_anchors(PosteriorBatch(probs_w, np.log(probs_w)),
                            PosteriorBatch(probs_f, np.log(probs_f)), occurring)
        perm = rng.permutation(9)
        a2 = detect_anchors(PosteriorBatch(probs_w[perm], np.log(probs_w[perm])),
                            PosteriorBatch(probs_f[perm], np.log(probs_f[perm])),
                            occurring)
        np.testing.assert_allclose(a1.posteriors, a2.posteriors, atol=0)


class TestSelectConfident:
    def test_examples(self):
        fixed = _post([[math.log(0.9), math.log(0.1)],
                       [0.0, 0.0],
                       [math.log(0.10), math.log(0.90)]])
        # extended model: 2 closed + 2 open slots
        w = _post([[5.0, 0.0, 0.0, 0.0],
                   [0.0, 5.0, 0.0, 0.0],
                   [0.0, 0.0, 0.0, 5.0]])
        sets = select_confident(fixed, w, tau_high=0.8, tau_low=0.2)
        assert sets.closed == [(0, 1), (2, 2)]
        assert sets.open == []  # instance 1 sits between the thresholds

    def test_open_selection(self):
        fixed = _post([[math.log(0.18 / 0.82) , 0.0]])  # max prob < 0.2 impossible at C=2
        # craft probs directly instead: use 4 closed classes
        probs_fixed = np.array([[0.19, 0.27, 0.27, 0.27]])
        fixed = PosteriorBatch(probs=probs_fixed, logits=np.log(probs_fixed))
        w = _post([[0.0, 0.0, 0.0, 0.0, 6.0, 0.0]])  # argmax on first open slot
        sets = select_confident(fixed, w, tau_high=0.8, tau_low=0.3)
        assert sets.closed == []
        assert sets.open == [(0, 5)]

    def test_disjoint(self):
        rng = np.random.default_rng(9)
        pf = rng.dirichlet(np.ones(3), size=40)
        pw = rng.dirichlet(np.ones(5), size=40)
        sets = select_confident(PosteriorBatch(pf, np.log(pf)),
                                PosteriorBatch(pw, np.log(pw)),
                                tau_high=0.6, tau_low=0.4)
        closed_idx = {i for i, _ in sets.closed}
        open_idx = {i for i, _ in sets.open}
        assert not closed_idx & open_idx


class TestAuxLoss:
    def test_empty_sets_exactly_zero(self):
        post = _post(np.random.default_rng(10).normal(size=(4, 5)))
        loss, d = aux_loss(post, ConfidentSets(closed=[], open=[]), lam=0.1,
                           n_closed=3)
        assert loss == 0.0
        np.testing.assert_array_equal(d, np.zeros_like(post.logits))

    def test_masked_term_hand_computed(self):
        # C = 2, n = 2, logits (a, b, c, d), closed label 1: term 2 is
        # -log softmax(b, c, d)[index of max(c, d)].
        logits = np.array([[1.0, 0.4, 0.8, 0.2]])
        post = _post(logits)
        sets = ConfidentSets(closed=[(0, 1)], open=[])
        lam = 0.7
        loss, _ = aux_loss(post, sets, lam=lam, n_closed=2)
        z = logits[0, 1:]
        masked = np.exp(z - z.max())
        masked /= masked.sum()
        expected_t2 = -math.log(masked[1])  # c beats d
        expected_t1 = -math.log(post.probs[0, 0])
        assert loss == pytest.approx(expected_t1 + lam * expected_t2, rel=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(6, 5)) * 2.0
        sets = ConfidentSets(closed=[(0, 1), (2, 3)], open=[(4, 5)])
        l1, _ = aux_loss(_post(logits), sets, lam=0.1, n_closed=3)
        l2, _ = aux_loss(_post(logits + 13.7), sets, lam=0.1, n_closed=3)
        assert l1 == pytest.approx(l2, rel=1e-9)

    def test_lambda_zero_is_plain_ce(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=(4, 5))
        post = _post(logits)
        sets = ConfidentSets(closed=[(0, 2), (1, 1)], open=[(2, 4)])
        loss, _ = aux_loss(post, sets, lam=0.0, n_closed=3)
        expected = -(math.log(post.probs[0, 1]) + math.log(post.probs[1, 0])
                     + math.log(post.probs[2, 3])) / 3.0
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(13)
        checked = 0
        while checked < 10:
            c, n_open = 3, 2
            params, x = _safe_instance(rng, n=6, d=4, h=3, k=c + n_open)
            post = forward(params, x)
            # fixed sets, as in training (selection is held constant while
            # the loss is differentiated)
            sets = ConfidentSets(closed=[(0, 1), (3, 2)], open=[(1, 4), (5, 5)])
            # keep the open-slot argmax stable under probing
            gaps = np.abs(np.diff(np.sort(post.probs[:, c:], axis=1), axis=1))
            if gaps.min() < 1e-4:
                continue
            _, dlogits = aux_loss(post, sets, lam=0.3, n_closed=c)
            grads = backward(params, x, dlogits)
            if not _noise_band_free(grads.w_out):
                continue
            checked += 1
            numeric = fd_gradient(
                lambda m: aux_loss(forward(replace(params, w_out=m), x), sets,
                                   lam=0.3, n_closed=c)[0],
                params.w_out,
            )
            assert max_rel_error(grads.w_out, numeric) < 1e-6
