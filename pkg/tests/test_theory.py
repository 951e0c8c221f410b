import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmmia.errors import ContractError
from dmmia.models import Classifier
from dmmia.numerics import Rng
from dmmia.theory import (
    PerturbationProbe,
    fisher_trace_enumerated,
    fisher_trace_mc,
    fisher_trace_softmax,
    jacobian,
    kl_taylor_probe,
    project_simplex,
    pullback_identity_check,
    random_probe,
    run_suite,
    rows_to_csv,
    simplex_min_check,
)


@pytest.fixture(scope="module")
def net():
    return Classifier(5, hidden=(32, 16), seed=7)


@pytest.fixture
def probe(net):
    return random_probe(Rng(3), net)


# -- Fisher trace ----------------------------------------------------------------

def test_uniform_trace_is_k_squared():
    assert fisher_trace_softmax(np.full(10, 0.1)) == pytest.approx(100.0, rel=1e-14)


def test_hand_trace():
    assert fisher_trace_softmax([0.5, 0.25, 0.25]) == 10.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=10))
def test_enumeration_agrees_with_closed_form(weights):
    p = np.array(weights) / np.sum(weights)
    assert fisher_trace_enumerated(p) == pytest.approx(fisher_trace_softmax(p), rel=1e-12)


def test_monte_carlo_within_two_percent():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    mc = fisher_trace_mc(p, Rng(0), 10**6)
    assert abs(mc - fisher_trace_softmax(p)) <= 0.02 * fisher_trace_softmax(p)


def test_trace_domain_errors():
    with pytest.raises(ContractError):
        fisher_trace_softmax([1.0, 0.0])
    with pytest.raises(ContractError):
        fisher_trace_softmax([0.5, 0.6])


# -- probes --------------------------------------------------------------------

def test_probe_normalizes_and_bounds_scale():
    pr = PerturbationProbe(np.zeros(4), np.array([3.0, 0, 4.0, 0]), 1e-3)
    assert np.linalg.norm(pr.direction) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ContractError):
        PerturbationProbe(np.zeros(4), np.ones(4), 0.1)
    with pytest.raises(ContractError):
        PerturbationProbe(np.zeros(4), np.zeros(4), 1e-3)


def test_zero_scale_gives_zero(net, probe):
    est = kl_taylor_probe(net, probe.with_scale(0.0))
    assert est.quadratic_form == 0.0 and est.exact_kl == 0.0
    assert est.exact_trace > 0


def test_quadratic_form_is_even(net, probe):
    flipped = PerturbationProbe(probe.base, -probe.direction, probe.scale)
    assert kl_taylor_probe(net, flipped).quadratic_form == kl_taylor_probe(net, probe).quadratic_form


def test_kl_gap_shrinks_with_scale(net, probe):
    gaps = []
    for eps in (1e-2, 5e-3, 2.5e-3):
        est = kl_taylor_probe(net, probe.with_scale(eps))
        gaps.append(abs(est.exact_kl - est.quadratic_form) / est.quadratic_form)
    assert gaps[1] <= 0.75 * gaps[0] and gaps[2] <= 0.75 * gaps[1]


def test_pullback_identity(net):
    rng = Rng(11)
    for _ in range(5):
        lhs, rhs = pullback_identity_check(net, random_probe(rng, net))
        assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))
        assert lhs > 0


def test_pullback_null_space_direction(net, probe):
    jac = jacobian(net, probe.base)
    q, _ = np.linalg.qr(jac.T)
    eta = Rng(5).normal(jac.shape[1])
    eta -= q @ (q.T @ eta)
    lhs, rhs = pullback_identity_check(net, PerturbationProbe(probe.base, eta, 1e-2))
    ref, _ = pullback_identity_check(net, probe)
    assert abs(lhs) <= 1e-12 * ref and abs(rhs) <= 1e-12 * ref


def test_doubling_eta_quadruples(net, probe):
    a = pullback_identity_check(net, probe.with_scale(2.5e-3))
    b = pullback_identity_check(net, probe.with_scale(5e-3))
    assert b[0] == pytest.approx(4 * a[0], rel=1e-12)
    assert b[1] == pytest.approx(4 * a[1], rel=1e-12)


def test_jacobian_rows_sum_to_zero(net, probe):
    assert np.allclose(jacobian(net, probe.base).sum(axis=0), 0.0, atol=1e-15)


def test_degenerate_prediction_rejected():
    clf = Classifier(3, hidden=(8,), seed=0)
    w, b = clf.net.layers[-1]
    b.data[...] = [100.0, 0.0, 0.0]
    with pytest.raises(ContractError):
        kl_taylor_probe(clf, PerturbationProbe(np.zeros(784), np.ones(784), 1e-3))


# -- simplex -------------------------------------------------------------------

def test_projection_lands_on_simplex(nprng):
    for _ in range(20):
        q = project_simplex(nprng.normal(size=7) * 3)
        assert np.all(q >= 0) and abs(q.sum() - 1) <= 1e-12
    assert project_simplex(np.array([0.2, 0.3, 0.5])).tolist() == pytest.approx([0.2, 0.3, 0.5])


def test_simplex_k2():
    assert simplex_min_check(2, Rng(0)) == pytest.approx([0.5, 0.5], abs=1e-6)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_simplex_uniform_from_random_starts(k):
    rng = Rng(k)
    for _ in range(3):
        p = simplex_min_check(k, rng)
        assert np.max(np.abs(p - 1.0 / k)) <= 1e-6
        assert math.isclose(np.sum(1.0 / p), k * k, rel_tol=1e-9)


def test_simplex_rejects_k1():
    with pytest.raises(ContractError):
        simplex_min_check(1)


# -- suite ---------------------------------------------------------------------

def test_suite_all_pass_and_csv(net):
    rows = run_suite(net, Rng(0), n_probes=3, mc_samples=10**5)
    assert all(r.passed for r in rows), [r for r in rows if not r.passed]
    text = rows_to_csv(rows)
    assert text.startswith("check,lhs,rhs,gap,pass\n")
    assert len(text.splitlines()) == len(rows) + 1
    assert sum(r.check.startswith("kl_taylor") for r in rows) == 6
