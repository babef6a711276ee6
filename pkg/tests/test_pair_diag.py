import math
from fractions import Fraction

import numpy as np
import pytest

from critical_on import pair_diag as P
from critical_on import spin_model as sm
from critical_on.errors import DomainError
from critical_on.specfun import f_and_g


def _view(N, n, rng, beta=None):
    return sm.view_from_spins(sm.SpinConfig.uniform(N, n, N if beta is None else beta, rng).spins,
                              N if beta is None else beta)


def u_rational(nu2, x, terms=60):
    """U_nu at a rational point by exact partial sums (nu = nu2 / 2)."""
    nu = Fraction(nu2, 2)
    t = Fraction(1)
    s = Fraction(1)
    for k in range(terms):
        t *= x * x / (4 * (k + 1) * (nu + 1 + k))
        s += t
    return s


def test_single_site_drift():
    s = np.array([[0.6, 0.8]])
    v = sm.view_from_spins(s, 2.0)
    assert np.allclose(P.w_drift_direct(v), -s[0], atol=1e-15)
    cov = P.cond_cov_direct(v)
    assert np.allclose(cov, np.eye(2) / 2 + np.outer(s[0], s[0]), atol=1e-15)


def test_single_site_r1():
    N = 3
    s = np.array([[0.0, 0.6, 0.8]])
    v = sm.view_from_spins(s, 3.0)
    m = s[0]
    f1, _ = f_and_g(N, 1.0)
    expect = N * (f1 - 1 + N / (N + 2)) * m + N * (0 - m * f1)
    assert np.allclose(P.r1(v), expect, atol=1e-14)


def test_aligned_configuration_exact():
    n = 4
    v = sm.view_from_spins(np.tile([1.0, 0.0], (n, 1)), 2.0)
    # m_(i) = 3/4 e1 for every site; f_2(3/4) = U_1(3/2) / U_0(3/2)
    x = Fraction(3, 2)
    f = u_rational(2, x) / u_rational(0, x)
    expect = n ** -1.75 * n * float(f) * 0.75 - n ** -0.75 * n / n
    assert P.w_drift_direct(v)[0] == pytest.approx(expect, rel=1e-13)
    assert P.w_drift_direct(v)[1] == 0.0


@pytest.mark.parametrize("n", [4, 16, 64])
@pytest.mark.parametrize("N", [2, 3, 5])
def test_decomposition_identities(n, N):
    rng = np.random.default_rng(1000 * N + n)
    for _ in range(30):
        v = _view(N, n, rng)
        rep = P.pair_report(v)
        assert rep.mean_identity_residual <= 1e-10
        assert rep.cov_identity_residual <= 1e-10
        assert np.allclose(rep.cond_mean, P.drift_from_decomposition(v), rtol=0, atol=1e-10 * rep.lam)
        assert np.allclose(rep.cond_cov, rep.cond_cov.T, atol=1e-14)
        assert np.linalg.eigvalsh(rep.cond_cov).min() >= -1e-10
        assert np.allclose(rep.r2, rep.r2.T, atol=1e-12)
        assert np.trace(rep.r2_terms[0]) == pytest.approx(0.0, abs=1e-12)
        assert P.hs_norm(rep.r2_terms[1]) == pytest.approx(N * float(v.W @ v.W) / math.sqrt(n), rel=1e-12)


def test_gradient_consistency_exact():
    for N in range(2, 51):
        assert P.gradient_consistency(N) == Fraction(0)
    assert 4 * Fraction(2 * 2, 4 * 2 + 8) == Fraction(4, 4)


def test_realized_pairs_match_closed_forms():
    rng = np.random.default_rng(77)
    for N, n in ((2, 8), (3, 32)):
        cfg = sm.SpinConfig.uniform(N, n, float(N), rng)
        sm.sweep(cfg, rng, 50)
        v = sm.magnetization(cfg)
        d = P.realized_deltas(v.spins, float(N), 100000, rng)
        rep = P.pair_report(v)
        se = d.std(axis=0, ddof=1) / math.sqrt(len(d))
        assert np.all(np.abs(d.mean(axis=0) - rep.drift_direct) <= 4 * se)
        prod = d[:, :, None] * d[:, None, :]
        se2 = prod.std(axis=0, ddof=1) / math.sqrt(len(d))
        assert np.all(np.abs(prod.mean(axis=0) - rep.cond_cov) <= 4 * se2)
        assert np.all(np.linalg.norm(d, axis=1) <= rep.delta_bound * (1 + 1e-12))


def test_third_moment_branches():
    # n = 2: |delta| can exceed 1 and there the factor is 1
    d = np.array([[1.5, 0.0], [0.5, 0.0], [0.0, 0.0]])
    stat = P.third_moment_statistic(d, 2, 2)
    lam = P.pair_lambda(2, 2)
    assert stat[0] == pytest.approx(1.5 ** 3 * max(math.log(1.5), 1.0) / lam)
    assert stat[1] == pytest.approx(0.125 * max(math.log(2.0), 1.0) / lam)
    assert stat[2] == 0.0
    rng = np.random.default_rng(3)
    v = _view(2, 2, rng)
    dd = P.realized_deltas(v.spins, 2.0, 20000, rng)
    r = np.linalg.norm(dd, axis=1)
    assert np.any(r > 1.0) and np.all(r <= 2 * 2 ** -0.75 + 1e-12)


def test_fit_rate_exact_power():
    n_grid = [16, 64, 256]
    vals = np.array([[3.0 * n ** -0.5 * (1 + 0.01 * j) for j in range(4)] for n in n_grid])
    est = P.fit_rate(n_grid, vals)
    assert est.fitted_slope == pytest.approx(-0.5, abs=1e-12)
    assert est.slope_ci[0] <= -0.5 <= est.slope_ci[1]
    one = P.fit_rate([16], vals[:1])
    assert one.fitted_slope is None and one.slope_ci is None
    with pytest.raises(DomainError):
        P.fit_rate(n_grid, vals[:, :1])


def test_small_sweep_runs():
    sw = P.pair_sweep(2, [8, 32], samples_per_replica=30, replicas=3, seed=1, burn_in=20, thin=2)
    assert sw.max_delta_ratio <= 1 + 1e-12
    assert sw.max_mean_residual <= 1e-10 and sw.max_cov_residual <= 1e-10
    assert set(sw.rates) == set(P.DIAGNOSTICS)
    assert len(sw.rows) == 6
    again = P.pair_sweep(2, [8, 32], samples_per_replica=30, replicas=3, seed=1, burn_in=20, thin=2)
    assert again.rows == sw.rows
