"""Finite-difference certification harness tests.

The heavy lifting (are the analytic gradients right?) happens inside
run_gradcheck itself; these tests pin the harness contract — term
coverage, the tolerance gate, and that the corruption hook actually
trips the check it is supposed to trip.
"""

import time

import pytest

from simt.gradcheck import TERMS, TOLERANCE, TermReport, run_gradcheck


def test_default_run_passes_all_terms():
    reports = run_gradcheck(seed=0, instances=50)
    assert [r.term for r in reports] == list(TERMS)
    for r in reports:
        assert r.instances == 50
        assert r.max_rel_error < TOLERANCE, r
        assert r.passed


def test_terms_are_the_five_losses():
    assert TERMS == ("L_LC", "L_Aux", "Volume", "Anchor", "Convex")


@pytest.mark.parametrize("term", TERMS)
def test_corrupt_hook_fails_exactly_that_term(term):
    reports = run_gradcheck(seed=1, instances=5, corrupt=term)
    by_term = {r.term: r for r in reports}
    assert not by_term[term].passed
    for other in TERMS:
        if other != term:
            assert by_term[other].passed, by_term[other]


def test_unknown_term_rejected():
    with pytest.raises(ValueError, match="unknown term"):
        run_gradcheck(corrupt="Entropy")


def test_report_pass_property_is_the_tolerance_gate():
    assert TermReport("Volume", 3, TOLERANCE / 2).passed
    assert not TermReport("Volume", 3, TOLERANCE * 2).passed


def test_seed_changes_draws_but_not_verdict():
    a = run_gradcheck(seed=0, instances=8)
    b = run_gradcheck(seed=7, instances=8)
    assert all(r.passed for r in a + b)
    assert any(x.max_rel_error != y.max_rel_error for x, y in zip(a, b))


def test_runtime_within_budget():
    start = time.monotonic()
    run_gradcheck(seed=0, instances=50)
    assert time.monotonic() - start < 60.0
