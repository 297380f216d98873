"""Transition-matrix tests: frozen examples, invariants, fd certification."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simt.linalg import fd_gradient, gram_logvol, max_rel_error
from simt.transition import (
    AnchorSet,
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


def _params(U, class_dist, C, n):
    return SimTParams(U=np.asarray(U, float), class_dist=np.asarray(class_dist, float),
                      C=C, n=n)


def _random_params(rng, C=None, n=None):
    C = C or int(rng.integers(2, 5))
    n = n or int(rng.integers(1, 4))
    cd = rng.dirichlet(np.ones(C))
    return init_simt_params(C, n, cd, rng)


class TestMaterializeSimt:
    def test_zero_u_hand_value(self):
        # sigmoid(0) = 1/2, scaled by class_dist 1/2 gives V entries 1/4;
        # identity prior lifts the closed diagonal to 5/4.
        p = _params(np.zeros((3, 2)), [0.5, 0.5], C=2, n=1)
        t = materialize_simt(p)
        expected = np.array([[5 / 6, 1 / 6], [1 / 6, 5 / 6], [0.5, 0.5]])
        np.testing.assert_allclose(t, expected, atol=1e-15)

    def test_row_stochastic_and_diagonally_dominant(self):
        rng = np.random.default_rng(42)
        for _ in range(300):
            p = _random_params(rng)
            t = materialize_simt(p)
            np.testing.assert_allclose(t.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(t >= 0.0) and np.all(t <= 1.0)
            assert np.array_equal(np.argmax(t[: p.C], axis=1), np.arange(p.C))

    def test_zero_class_dist_entry_is_floored(self):
        # A class absent from the pseudo labels must not zero out a column.
        p = _params(np.zeros((3, 2)), [1.0, 0.0], C=2, n=1)
        t = materialize_simt(p)
        assert np.all(t > 0.0)

    def test_single_open_row_warns(self, caplog):
        with caplog.at_level("WARNING", logger="simt.transition"):
            _params(np.zeros((3, 2)), [0.5, 0.5], C=2, n=1)
        assert any("n=1" in rec.message for rec in caplog.records)

    def test_class_dist_must_sum_to_one(self):
        with pytest.raises(ValueError):
            _params(np.zeros((3, 2)), [0.6, 0.6], C=2, n=1)


class TestBackpropSimt:
    def test_zero_upstream_gradient_is_zero(self):
        rng = np.random.default_rng(0)
        p = _random_params(rng)
        d = backprop_simt(p, np.zeros((p.C + p.n, p.C)))
        np.testing.assert_array_equal(d, np.zeros_like(p.U))

    def test_volume_chain_matches_fd(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = _random_params(rng)

            def f(u):
                q = _params(u, p.class_dist, p.C, p.n)
                return volume_loss(materialize_simt(q))

            t = materialize_simt(p)
            analytic = backprop_simt(p, grad_volume_loss(t))
            numeric = fd_gradient(f, p.U)
            assert max_rel_error(analytic, numeric) < 1e-6

    def test_anchor_chain_matches_fd(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = _random_params(rng)
            k = p.C + p.n
            posts = rng.dirichlet(np.ones(p.C), size=k)
            present = rng.random(k) < 0.7
            anchors = AnchorSet(posteriors=posts, present=present)

            def f(u):
                q = _params(u, p.class_dist, p.C, p.n)
                return anchor_loss(materialize_simt(q), anchors)[0]

            _, dt = anchor_loss(materialize_simt(p), anchors)
            analytic = backprop_simt(p, dt)
            numeric = fd_gradient(f, p.U)
            assert max_rel_error(analytic, numeric) < 1e-6

    def test_saturated_u_gradient_vanishes(self):
        rng = np.random.default_rng(3)
        p = _random_params(rng, C=3, n=2)
        p.U = 35.0 * np.sign(rng.normal(size=p.U.shape))
        t = materialize_simt(p)
        d = backprop_simt(p, grad_volume_loss(t))
        assert np.max(np.abs(d)) < 1e-10


class TestAnchorLoss:
    def test_hand_value_single_row(self):
        t = np.array([[0.8, 0.2], [0.3, 0.7], [0.5, 0.5]])
        anchors = AnchorSet(
            posteriors=np.array([[0.6, 0.4], [0.0, 0.0], [0.0, 0.0]]),
            present=np.array([True, False, False]),
        )
        loss, grad = anchor_loss(t, anchors)
        assert loss == pytest.approx(0.08, abs=1e-15)
        np.testing.assert_allclose(grad[0], [0.4, -0.4], atol=1e-15)
        np.testing.assert_array_equal(grad[1:], np.zeros((2, 2)))

    def test_no_present_rows_is_zero(self):
        t = np.array([[0.8, 0.2], [0.3, 0.7]])
        anchors = AnchorSet(posteriors=np.zeros((2, 2)),
                            present=np.array([False, False]))
        loss, grad = anchor_loss(t, anchors)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, np.zeros((2, 2)))


class TestWeighting:
    def test_uniform_hand_value(self):
        u = materialize_weighting(WeightingParams(W=np.zeros((3, 3))))
        expected = np.array([[-1.0, 0.5, 0.5], [0.5, -1.0, 0.5], [0.5, 0.5, -1.0]])
        np.testing.assert_array_equal(u, expected)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(2, 6))
    @settings(max_examples=150, deadline=None)
    def test_invariants_exact(self, seed, k):
        rng = np.random.default_rng(seed)
        u = materialize_weighting(WeightingParams(W=rng.normal(size=(k, k)) * 3.0))
        for j in range(k):
            assert u[j, j] == -1.0
            off = np.delete(u[j], j)
            assert np.all(off >= 0.0)
            assert math.fsum(off) == 1.0

    def test_init_is_uniform(self):
        u = materialize_weighting(init_weighting_params(2, 1))
        np.testing.assert_array_equal(
            u, [[-1.0, 0.5, 0.5], [0.5, -1.0, 0.5], [0.5, 0.5, -1.0]])


class TestConvexLosses:
    def test_hand_value_2_25(self):
        # Rows 1 and 2 of uT are (-3/4, 3/4) with squared norm 9/8 each;
        # row 3 is an exact convex combination and contributes zero.
        u = materialize_weighting(WeightingParams(W=np.zeros((3, 3))))
        t = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        loss, _ = convex_inner_loss(u, t)
        assert loss == pytest.approx(2.25, abs=1e-15)
        ut = u @ t
        assert float(ut[2] @ ut[2]) == 0.0

    def test_outer_is_negative_inner(self):
        rng = np.random.default_rng(9)
        t = rng.dirichlet(np.ones(3), size=5)
        u = materialize_weighting(WeightingParams(W=rng.normal(size=(5, 5))))
        inner, _ = convex_inner_loss(u, t)
        outer, _ = convex_outer_loss(u, t)
        assert outer == pytest.approx(-inner, abs=1e-12)

    def test_dependent_row_contribution_exactly_zero(self):
        # Row 4 is the dyadic combination 1/2 r1 + 1/4 r2 + 1/4 r3, so the
        # matching u row cancels it exactly in float arithmetic.
        rows = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        dep = 0.5 * rows[0] + 0.25 * rows[1] + 0.25 * rows[2]
        t = np.vstack([rows, dep])
        u = np.array([
            [-1.0, 0.5, 0.25, 0.25],
            [0.5, -1.0, 0.25, 0.25],
            [0.5, 0.25, -1.0, 0.25],
            [0.5, 0.25, 0.25, -1.0],
        ])
        ut = u @ t
        assert float(ut[3] @ ut[3]) == 0.0

    def test_inner_positive_for_general_position_rows(self):
        # Brute-force grid over all valid u at C+n = 3: with affinely
        # independent rows no u can zero the reconstruction error.
        t = np.array([[0.9, 0.05, 0.05], [0.05, 0.9, 0.05], [0.05, 0.05, 0.9]])
        grid = np.linspace(0.0, 1.0, 21)
        best = np.inf
        for a in grid:
            for b in grid:
                for c in grid:
                    u = np.array([
                        [-1.0, a, 1.0 - a],
                        [b, -1.0, 1.0 - b],
                        [c, 1.0 - c, -1.0],
                    ])
                    ut = u @ t
                    best = min(best, float(np.sum(ut * ut)))
        assert best > 1e-3

    def test_inner_gradient_matches_fd(self):
        rng = np.random.default_rng(12)
        for _ in range(15):
            k = int(rng.integers(3, 6))
            c = int(rng.integers(2, k))
            t = rng.dirichlet(np.ones(c), size=k)
            w = rng.normal(size=(k, k))
            u = materialize_weighting(WeightingParams(W=w))
            _, analytic = convex_inner_loss(u, t)

            def f(wm):
                um = materialize_weighting(WeightingParams(W=wm))
                return convex_inner_loss(um, t)[0]

            numeric = fd_gradient(f, w)
            assert max_rel_error(analytic, numeric) < 1e-6

    def test_outer_gradient_matches_fd_through_u_free(self):
        rng = np.random.default_rng(13)
        for _ in range(15):
            p = _random_params(rng)
            k = p.C + p.n
            u = materialize_weighting(
                WeightingParams(W=rng.normal(size=(k, k))))

            def f(ufree):
                q = _params(ufree, p.class_dist, p.C, p.n)
                return convex_outer_loss(u, materialize_simt(q))[0]

            t = materialize_simt(p)
            _, dt = convex_outer_loss(u, t)
            analytic = backprop_simt(p, dt)
            numeric = fd_gradient(f, p.U)
            assert max_rel_error(analytic, numeric) < 1e-6

    def test_inner_gradient_zero_on_diagonal(self):
        rng = np.random.default_rng(14)
        t = rng.dirichlet(np.ones(3), size=4)
        u = materialize_weighting(WeightingParams(W=rng.normal(size=(4, 4))))
        _, dw = convex_inner_loss(u, t)
        np.testing.assert_array_equal(np.diag(dw), np.zeros(4))


class TestVolumeDescent:
    def test_gradient_descent_shrinks_volume(self):
        rng = np.random.default_rng(21)
        p = _random_params(rng, C=3, n=2)
        start = volume_loss(materialize_simt(p))
        val = start
        for _ in range(100):
            t = materialize_simt(p)
            d = backprop_simt(p, grad_volume_loss(t))
            p.U = p.U - 0.5 * d
            val = volume_loss(materialize_simt(p))
        assert val < start
