import itertools
import warnings

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from critical_on import transport as T
from critical_on.errors import InstanceTooLargeError, SizeMismatchError, DomainError


def brute_force(a, b):
    C = T.matching_cost_matrix(a, b)
    m = len(a)
    return min(sum(C[i, p[i]] for i in range(m)) for p in itertools.permutations(range(m))) / m


def test_trivial_cases(rng):
    a = rng.standard_normal((7, 3))
    assert T.w1_exact(a, a).cost == 0.0
    assert T.w1_exact(a[:1], a[1:2]).cost == pytest.approx(np.linalg.norm(a[0] - a[1]))
    assert T.w1_exact([[0, 0], [1, 0]], [[0, 1], [1, 1]]).cost == pytest.approx(1.0, abs=1e-15)


def test_brute_force_equivalence():
    rng = np.random.default_rng(8)
    for trial in range(200):
        m = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        a = rng.standard_normal((m, d))
        b = rng.standard_normal((m, d)) + rng.uniform(-1, 1)
        assert T.w1_exact(a, b).cost == pytest.approx(brute_force(a, b), rel=1e-14, abs=1e-15)


def test_matches_scipy_and_certificate(rng):
    for m in (50, 300):
        a = rng.standard_normal((m, 2))
        b = rng.standard_normal((m, 2)) * 1.3
        res = T.w1_exact(a, b)
        C = T.matching_cost_matrix(a, b)
        r, c = linear_sum_assignment(C)
        assert res.cost == pytest.approx(C[r, c].mean(), rel=1e-12)
        assert res.certificate_residual <= 1e-9 * res.cost * m
        assert sorted(res.matching.tolist()) == list(range(m))
        assert C[np.arange(m), res.matching].mean() == pytest.approx(res.cost, rel=1e-14)


def test_metric_axioms():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = int(rng.integers(1, 65))
        a, b, c = (rng.standard_normal((m, 2)) * rng.uniform(0.2, 2) for _ in range(3))
        ab = T.w1_exact(a, b).cost
        assert abs(ab - T.w1_exact(b, a).cost) <= 1e-12
        assert ab <= T.w1_exact(a, c).cost + T.w1_exact(c, b).cost + 1e-12


def test_translation_and_scaling(rng):
    a = rng.standard_normal((40, 3))
    b = rng.standard_normal((40, 3))
    base = T.w1_exact(a, b).cost
    shift = np.array([5.0, -2.0, 0.5])
    assert abs(T.w1_exact(a + shift, b + shift).cost - base) <= 1e-12
    for s in (0.0, 0.3, 7.0):
        assert abs(T.w1_exact(s * a, s * b).cost - s * base) <= 1e-12 * max(1, s)


def test_zero_iff_same_multiset(rng):
    a = rng.standard_normal((20, 2))
    assert T.w1_exact(a, a[rng.permutation(20)]).cost == 0.0
    b = a.copy()
    b[3, 0] += 1e-6
    assert T.w1_exact(a, b).cost > 0


def test_errors(rng):
    with pytest.raises(SizeMismatchError):
        T.w1_exact(rng.standard_normal((5, 2)), rng.standard_normal((4, 2)))
    with pytest.raises(SizeMismatchError):
        T.w1_exact(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
    with pytest.raises(InstanceTooLargeError):
        T.w1_exact(np.zeros((11, 1)), np.zeros((11, 1)), max_size=10)
    with pytest.raises(DomainError):
        T.EmpiricalCloud(np.array([[np.nan, 0.0]]))
    with pytest.raises(SizeMismatchError):
        T.w1_sorted_1d([0, 1], [1])


def test_resample_mode_warns(rng):
    a = rng.standard_normal((30, 2))
    b = rng.standard_normal((20, 2))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = T.w1_exact(a, b, on_mismatch="resample", seed=1)
    assert any("resampling" in str(x.message) for x in w)
    assert res.matching.size == 20


def test_sorted_1d(rng):
    assert T.w1_sorted_1d([0, 1], [1, 2]).cost == 1.0
    a = rng.standard_normal(50)
    assert T.w1_sorted_1d(a, rng.permutation(a)).cost == 0.0
    for m in (1, 17, 200):
        a = rng.standard_normal(m)
        b = rng.standard_normal(m) + 0.3
        assert T.w1_sorted_1d(a, b).cost == pytest.approx(T.w1_exact(a[:, None], b[:, None]).cost, rel=1e-12)


def test_sliced(rng):
    a = rng.standard_normal((60, 2))
    assert T.w1_sliced(a, a, 10).cost == 0.0
    x = rng.standard_normal(80)
    y = rng.standard_normal(80) * 2
    for k in (1, 5):
        assert T.w1_sliced(x[:, None], y[:, None], k, seed=k).cost == pytest.approx(T.w1_sorted_1d(x, y).cost, rel=1e-13)
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        a = r.standard_normal((100, 2))
        b = r.standard_normal((100, 2)) * 1.5 + 0.2
        assert T.w1_sliced(a, b, 50, seed=seed).cost <= T.w1_exact(a, b).cost + 1e-12


def test_dispatch(rng):
    a = rng.standard_normal((10, 1))
    b = rng.standard_normal((10, 1))
    assert T.w1(a, b, "sorted1d").cost == pytest.approx(T.w1(a, b, "exact").cost)
    with pytest.raises(DomainError):
        T.w1(a, b, "sinkhorn")
