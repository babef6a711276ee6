import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from critical_on import constants as C
from critical_on.errors import AssumptionViolated, DegenerateConstantsError, DomainError


@pytest.fixture(scope="module")
def quartic2():
    return C.quartic_potential(2)


@pytest.fixture(scope="module")
def chain2(quartic2):
    return C.ergodic_constants(quartic2)


def test_quartic_grad_at_unit_vector():
    for N in (2, 3, 5):
        s = C.quartic_potential(N)
        e = np.eye(N)[0]
        a = N * N / (4 * N + 8)
        np.testing.assert_allclose(s.grad(e), 4 * a * e, rtol=1e-15)


def test_quartic_n2_values(quartic2):
    e = np.array([1.0, 0.0])
    assert quartic2.c1 == 1.0 and quartic2.c2 == 1.0
    assert quartic2.M1 == 12.0 and quartic2.M2 == 12.0
    assert quartic2.rho(e) == pytest.approx(1.0, abs=1e-15)
    assert quartic2.B == 1.0 and quartic2.k == 2.0


@pytest.mark.parametrize("N", [2, 3, 5])
def test_hessian_matches_finite_differences(N, rng):
    s = C.quartic_potential(N)
    for _ in range(100):
        x = rng.standard_normal(N) * 2
        u = rng.standard_normal(N)
        h = 1e-5
        fd = (s.grad(x + h * u) - s.grad(x - h * u)) / (2 * h)
        ex = s.hess_action(x, u)
        assert np.linalg.norm(fd - ex) <= 1e-6 * np.linalg.norm(ex)


@pytest.mark.parametrize("N", [2, 4])
def test_higher_actions_match_finite_differences(N, rng):
    s = C.quartic_potential(N)
    h = 1e-5
    for _ in range(20):
        x, u, v, w = (rng.standard_normal(N) for _ in range(4))
        fd3 = (s.hess_action(x + h * v, u) - s.hess_action(x - h * v, u)) / (2 * h)
        np.testing.assert_allclose(s.d3_action(x, u, v), fd3, rtol=1e-6, atol=1e-9)
        fd4 = (s.d3_action(x + h * w, u, v) - s.d3_action(x - h * w, u, v)) / (2 * h)
        np.testing.assert_allclose(s.d4_action(x, u, v, w), fd4, rtol=1e-6, atol=1e-9)


def test_actions_broadcast_over_batches(quartic2, rng):
    X = rng.standard_normal((7, 2))
    U = rng.standard_normal((7, 2))
    batch = quartic2.hess_action(X, U)
    assert batch.shape == (7, 2)
    for j in range(7):
        np.testing.assert_allclose(batch[j], quartic2.hess_action(X[j], U[j]), rtol=1e-15)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
@settings(max_examples=200, deadline=None)
def test_curvature_margin_is_8a_xu_squared(xs, us):
    s = C.quartic_potential(3)
    a = 9 / 20
    x, u = np.array(xs), np.array(us)
    margin = u @ s.hess_action(x, u) - s.rho(x) * (u @ u)
    assert margin == pytest.approx(8 * a * (x @ u) ** 2, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("N", [2, 3, 5, 10])
def test_assumption_check_passes_for_quartic(N):
    rep = C.assumption_check(C.quartic_potential(N), trials=500, seed=1)
    assert rep.worst >= -C.MARGIN_TOL
    assert rep.hessian_symmetry < 1e-12
    assert rep.hessian_fd_error < 1e-6


def test_fourth_order_margin_at_origin(quartic2):
    x = np.zeros((1, 2))
    u = np.array([[1.0, 0.0]])
    m = C._margins(quartic2, x, u, u, u)
    assert m["third"][0] == pytest.approx(quartic2.M1)
    # D^4 is constant (24a on aligned unit vectors), so the origin margin is M2 - 24a
    assert m["fourth"][0] == pytest.approx(quartic2.M2 - 6.0)


def test_wrong_m1_is_reported_with_witness():
    bad = C.quartic_potential(2, M1=1.0)
    with pytest.raises(AssumptionViolated) as ei:
        C.assumption_check(bad, trials=200, seed=0, radius=10.0)
    w = ei.value.witness
    assert "x" in w and np.linalg.norm(w["x"]) > 1.0


def test_wrong_m1_at_radius_ten_is_a_violation():
    bad = C.quartic_potential(2, M1=1.0)
    x = np.array([[10.0, 0.0]])
    u = np.array([[1.0, 0.0]])
    assert C._margins(bad, x, u, u, u)["third"][0] < 0


def test_quadratic_assumptions_including_zeroth():
    rep = C.assumption_check(C.quadratic_potential(2), trials=300, seed=0)
    assert "hessian_bound" in rep.margins
    assert rep.worst >= -C.MARGIN_TOL


def test_k_zero_requires_m0():
    with pytest.raises(DomainError):
        C.quadratic_potential(2).with_(M0=None)


def test_trials_must_be_positive(quartic2):
    with pytest.raises(DomainError):
        C.assumption_check(quartic2, trials=0)


def test_eta_values(quartic2):
    assert C.eta(quartic2.with_(B=0.0)) == pytest.approx(math.sqrt(1 / 12), rel=1e-15)
    assert C.eta(quartic2) == 0.25
    q = C.quadratic_potential(1).with_(B=1.0)
    assert C.eta(q) == 0.25
    assert C.eta(quartic2.with_(B=1e6)) < 1e-12


def test_eta_nonincreasing_in_b(quartic2):
    vals = [C.eta(quartic2.with_(B=b)) for b in np.linspace(0, 5, 51)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_degenerate_chain_at_b_zero(quartic2):
    with pytest.raises(DegenerateConstantsError, match="B > 0"):
        C.ergodic_constants(quartic2.with_(B=0.0))


def test_chain_invariants(chain2):
    k = chain2
    assert 0 < k.J_2t0 < 1
    assert k.theta > 0 and k.C1 > 1
    assert k.t1 >= 2 * k.t0
    for name in ("s_m12", "s_0", "q_m1", "q_m12", "q_0", "q_1", "q_2", "K1", "K2", "K3"):
        assert getattr(k, name) > 0
    assert k.J(2 * k.t0) == pytest.approx(k.J_2t0, rel=1e-15)


def test_j_increasing_and_tends_to_one(chain2):
    t = np.linspace(1, 1e6, 1000)
    J = chain2.J(t)
    assert np.all(np.diff(J) > 0)
    assert J[-1] == pytest.approx(1.0, abs=1e-6)


def test_golden_values_quartic_n2_b1(chain2):
    # frozen from the first verified run (quadrature matched the closed forms)
    golden = {
        "eta": 0.25, "chi": 1.0,
        "m1_mu": 0.9777410674469238, "tail_mass": 0.0046777349810472055,
        "t0": 3596.169643584524, "t1": 7192.339287169048,
        "C1": 1.0000219727326463, "theta": 3.05498536315928e-09,
        "C2": 5555161030.48198, "K1": 327341002.9364214,
        "K2": 3.636863966382682e+18, "K3": 2.8283645628542336e+29,
    }
    for key, val in golden.items():
        assert getattr(chain2, key) == pytest.approx(val, rel=1e-10), key


def test_hand_derived_chain_pieces(chain2):
    # m1 and the tail mass have closed forms for the quartic law with N = 2, a = 1/4:
    # r e^{-r^4/4} / Z, Z = sqrt(pi); tail(2) = erfc(2)
    assert chain2.tail_mass == pytest.approx(math.erfc(2.0), rel=1e-12)
    t0 = (0.25 + 2 + 2 * chain2.m1_mu) / (0.25 * math.erfc(2.0))
    assert chain2.t0 == pytest.approx(t0, rel=1e-12)
    one_m = 1 - math.exp(-1)
    assert chain2.t1 == 2 * chain2.t0 > math.log(4 * t0 / one_m)
    assert chain2.C1 == pytest.approx(1 / math.sqrt(1 - one_m / (4 * t0)), rel=1e-14)


def test_tail_and_bulk_sum_to_one(chain2):
    from critical_on.limit_laws import QuarticLaw
    law = QuarticLaw(2)
    assert law.tail_mass_quad(2.0) + law.mass_within_quad(2.0) == pytest.approx(1.0, abs=1e-9)


def test_chain_is_deterministic(quartic2):
    a = C.ergodic_constants(quartic2)
    b = C.ergodic_constants(quartic2)
    assert a.to_json() == b.to_json()


def test_m1_monotonicity(quartic2):
    lo = C.ergodic_constants(quartic2)
    hi = C.ergodic_constants(quartic2.with_(M1=quartic2.M1 * 2))
    for name in ("C2", "s_0", "q_m12", "q_0", "q_1", "q_2"):
        assert getattr(hi, name) >= getattr(lo, name)


def test_envelope_functions(chain2):
    k = chain2
    t = 2.0
    assert k.P(t) == pytest.approx((1.5 * k.M1 ** 2 * 3 + k.M2) * 3)
    assert k.S(t) == pytest.approx(k.s_m12 / math.sqrt(2) + k.s_0)
    assert k.Q(t) == pytest.approx(k.q_m1 / 2 + k.q_m12 / math.sqrt(2) + k.q_0 + 2 * k.q_1 + 4 * k.q_2)
    assert k.e_bound(0.0, 1.0) >= k.e_bound_from_proof(0.0, 1.0)


def test_field_completeness(chain2):
    names = {f.name for f in dataclasses.fields(chain2)}
    required = {"eta", "chi", "t0", "t1", "C1", "theta", "C2", "s_m12", "s_0", "q_m1", "q_m12",
                "q_0", "q_1", "q_2", "m1_mu", "tail_mass", "K1", "K2", "K3"}
    assert required <= names
    for fn in ("J", "P", "S", "Q"):
        assert callable(getattr(chain2, fn))
    d = json.loads(chain2.to_json())
    for name in required:
        assert "value" in d[name]
        assert d[name]["formula"], name


def test_quadratic_chain():
    k = C.ergodic_constants(C.quadratic_potential(1))
    assert k.chi == 1.0 and k.eta == 0.25
    assert k.m1_mu == pytest.approx(math.sqrt(2 / math.pi), rel=1e-12)
    assert k.tail_mass == pytest.approx(math.erfc(1 / math.sqrt(2)), rel=1e-12)
