"""Exchangeable-pair diagnostics for the critical chain.

The pair (W, W') comes from one heat-bath step at a uniformly chosen site,
with W = n^(-3/4) S and delta = W' - W. Conditional on the configuration,
its first two moments have closed forms in f_N, g_N; these are split into
the drift -grad V(W) and identity parts plus remainders R1, R2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import _vmf
from .errors import DomainError
from .specfun import ModelFunctions, f_and_g
from .spin_model import MagnetizationView, view_from_spins


def _loo(view: MagnetizationView):
    # the four closed forms share these; memoize on the (frozen) view
    cached = view.__dict__.get("_loo_cache")
    if cached is not None:
        return cached
    M = view.leave_one_out_all()
    x = np.linalg.norm(M, axis=1)
    f, g = f_and_g(view.N, np.minimum(x, 1.0))
    out = (M, x, np.atleast_1d(f), np.atleast_1d(g))
    object.__setattr__(view, "_loo_cache", out)
    return out


def pair_lambda(N: int, n: int) -> float:
    return 1.0 / (N * n ** 1.5)


def w_drift_direct(view: MagnetizationView) -> np.ndarray:
    """n^(-7/4) sum_i f_N(|m_(i)|) m_(i) - W/n."""
    M, _, f, _ = _loo(view)
    n = view.n
    return n ** -1.75 * (f[:, None] * M).sum(axis=0) - view.W / n


def r1(view: MagnetizationView) -> np.ndarray:
    N, n, m = view.N, view.n, view.m
    M, _, f, _ = _loo(view)
    x = float(np.linalg.norm(m))
    fm, _ = f_and_g(N, min(x, 1.0))
    first = (N / n ** 0.25) * ((f[:, None] * M).sum(axis=0) - n * fm * m)
    second = N * n ** 0.75 * (fm - 1.0 + N * x * x / (N + 2.0)) * m
    return first + second


def drift_from_decomposition(view: MagnetizationView) -> np.ndarray:
    N, W = view.N, view.W
    grad_v = (N * N / (N + 2.0)) * float(W @ W) * W
    return pair_lambda(N, view.n) * (-grad_v + r1(view))


def cond_cov_direct(view: MagnetizationView) -> np.ndarray:
    """E[delta delta^T | sigma] from the conditional first and second spin moments."""
    N, n = view.N, view.n
    sp = view.spins
    M, _, f, g = _loo(view)
    I = np.eye(N)
    cross = np.einsum("ia,ib->ab", f[:, None] * sp, M)
    cross = cross + cross.T
    total = (f.sum() / N) * I - cross + np.einsum("i,ia,ib->ab", g, M, M) + sp.T @ sp
    return n ** -1.5 * total / n


def r2_terms(view: MagnetizationView):
    """The five pieces A1..A5 of R2, in order."""
    N, n = view.N, view.n
    sp, W = view.spins, view.W
    M, x, _, g = _loo(view)
    I = np.eye(N)
    ss = sp.T @ sp
    A1 = (N / (2.0 * n)) * ss - 0.5 * I
    A2 = -(N / math.sqrt(n)) * np.outer(W, W)
    A3 = (N / n ** 2) * ss
    w = g * x * x
    c = np.einsum("ia,ib->ab", w[:, None] * sp, M)
    A4 = (N / (2.0 * n)) * (c + c.T - (w.sum() / N) * I)
    A5 = (N / (2.0 * n)) * np.einsum("i,ia,ib->ab", g, M, M)
    return [A1, A2, A3, A4, A5]


def r2(view: MagnetizationView) -> np.ndarray:
    return sum(r2_terms(view))


def hs_norm(A) -> float:
    return float(np.sqrt(np.sum(np.asarray(A) ** 2)))


@dataclass
class PairReport:
    n: int
    N: int
    lam: float
    cond_mean: np.ndarray
    cond_cov: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    r2_terms: list
    drift_direct: np.ndarray
    delta_bound: float
    mean_identity_residual: float
    cov_identity_residual: float


def pair_report(view: MagnetizationView) -> PairReport:
    N, n = view.N, view.n
    lam = pair_lambda(N, n)
    R1 = r1(view)
    terms = r2_terms(view)
    R2 = sum(terms)
    W = view.W
    mean = lam * (-(N * N / (N + 2.0)) * float(W @ W) * W + R1)
    direct = w_drift_direct(view)
    cov = cond_cov_direct(view)
    # compare on the lambda-free scale, where both sides are O(1)
    mres = float(np.max(np.abs(mean - direct))) / lam
    cres = float(np.max(np.abs(2.0 * (np.eye(N) + R2) - cov / lam)))
    return PairReport(n=n, N=N, lam=lam, cond_mean=mean, cond_cov=cov, r1=R1, r2=R2,
                      r2_terms=terms, drift_direct=direct, delta_bound=2.0 * n ** -0.75,
                      mean_identity_residual=mres, cov_identity_residual=cres)


def realized_deltas(spins, beta: float, count: int, rng, sites=None) -> np.ndarray:
    """delta = W' - W for ``count`` independent single-site resamples of one configuration."""
    spins = np.ascontiguousarray(spins, dtype=float)
    n = spins.shape[0]
    if sites is None:
        sites = np.minimum((rng.random(count) * n).astype(np.int64), n - 1)
    S = spins.sum(axis=0)
    d = _vmf.site_deltas(rng, spins, S, float(beta), np.asarray(sites, dtype=np.int64))
    return d * n ** -0.75


def third_moment_statistic(delta, N: int, n: int) -> np.ndarray:
    """(1/lambda) |delta|^3 (|log|delta|| v 1) per realized pair."""
    r = np.linalg.norm(np.atleast_2d(delta), axis=1)
    with np.errstate(divide="ignore"):
        lg = np.where(r > 0, np.abs(np.log(np.where(r > 0, r, 1.0))), 1.0)
    return r ** 3 * np.maximum(lg, 1.0) / pair_lambda(N, n)


def third_moment_bound(N: int, n: int) -> float:
    return 32.0 * N / math.sqrt(n)


# ---------------------------------------------------------------------------
# rates across n
# ---------------------------------------------------------------------------

@dataclass
class RateEstimate:
    n_grid: list
    values: list
    std_errors: list
    fitted_slope: Optional[float]
    slope_ci: Optional[tuple]
    slope_se: Optional[float] = None
    label: str = ""

    def as_dict(self):
        return {"label": self.label, "n_grid": list(self.n_grid), "values": list(self.values),
                "std_errors": list(self.std_errors), "fitted_slope": self.fitted_slope,
                "slope_ci": None if self.slope_ci is None else list(self.slope_ci),
                "slope_se": self.slope_se}


def _ols_slope(n_grid, vals):
    x = np.log(np.asarray(n_grid, dtype=float))
    y = np.log(np.asarray(vals, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def fit_rate(n_grid: Sequence[int], replica_values, label: str = "", z: float = 1.96) -> RateEstimate:
    """OLS slope of log(mean) on log n, with a jackknife over replicas.

    ``replica_values`` has shape (len(n_grid), R): one estimate per independent
    replica per n. With one grid point the slope is undefined (None).
    """
    vals = np.asarray(replica_values, dtype=float)
    if vals.ndim != 2 or vals.shape[0] != len(n_grid):
        raise DomainError("replica_values must have shape (len(n_grid), replicas)")
    G, R = vals.shape
    if R < 2:
        raise DomainError("need at least two replicas for standard errors")
    means = vals.mean(axis=1)
    ses = vals.std(axis=1, ddof=1) / math.sqrt(R)
    ses = np.maximum(ses, 1e-300)
    if G < 2:
        return RateEstimate(list(n_grid), means.tolist(), ses.tolist(), None, None, None, label)
    slope = _ols_slope(n_grid, means)
    loo = []
    for j in range(R):
        keep = np.delete(vals, j, axis=1).mean(axis=1)
        loo.append(_ols_slope(n_grid, keep))
    loo = np.array(loo)
    se = math.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2))
    return RateEstimate(list(n_grid), means.tolist(), ses.tolist(), slope,
                        (slope - z * se, slope + z * se), se, label)


def gradient_consistency(N: int) -> Fraction:
    """|4 a_N - N^2/(N+2)| in exact rationals (zero: the drift is -grad V)."""
    a = ModelFunctions(N).a_exact
    return abs(4 * a - Fraction(N * N, N + 2))


# ---------------------------------------------------------------------------
# n-sweep
# ---------------------------------------------------------------------------

DIAGNOSTICS = ("R1", "R2", "A1", "A2", "A3", "A4", "A5", "third")


@dataclass
class PairSweep:
    N: int
    n_grid: list
    rates: dict
    max_delta_ratio: float
    max_mean_residual: float
    max_cov_residual: float
    third_bound_ok: bool
    rows: list = field(default_factory=list)


def _replica_stats(N, n, beta, samples, burn_in, thin, seed, pairs_per_config):
    """Per-replica means of every diagnostic for one n (one chain per call)."""
    from .spin_model import SpinConfig, sweep  # local: keep import graph flat

    rng = np.random.default_rng(seed)
    cfg = SpinConfig.uniform(N, n, beta, rng)
    sweep(cfg, rng, burn_in)
    acc = {k: 0.0 for k in DIAGNOSTICS}
    max_ratio = 0.0
    mres = cres = 0.0
    for _ in range(samples):
        sweep(cfg, rng, thin)
        view = view_from_spins(cfg.spins.copy(), beta)
        rep = pair_report(view)
        acc["R1"] += float(np.linalg.norm(rep.r1))
        acc["R2"] += hs_norm(rep.r2)
        for j, A in enumerate(rep.r2_terms):
            acc[f"A{j + 1}"] += hs_norm(A)
        d = realized_deltas(view.spins, beta, pairs_per_config, rng)
        acc["third"] += float(third_moment_statistic(d, N, n).mean())
        max_ratio = max(max_ratio, float(np.max(np.linalg.norm(d, axis=1))) / rep.delta_bound)
        mres = max(mres, rep.mean_identity_residual)
        cres = max(cres, rep.cov_identity_residual)
    return {k: v / samples for k, v in acc.items()}, max_ratio, mres, cres


def pair_sweep(N: int, n_grid: Sequence[int], samples_per_replica: int, replicas: int,
               seed=0, burn_in: int = 1000, thin: int = 10, pairs_per_config: int = 8,
               beta: Optional[float] = None) -> PairSweep:
    """Estimate E|R1|, E||R2||, E||A_k|| and the third-moment term along the n-grid.

    Cell (g, r) uses child ``g * replicas + r`` of ``SeedSequence(seed)``.
    """
    beta = float(N) if beta is None else float(beta)
    children = np.random.SeedSequence(seed).spawn(len(n_grid) * replicas)
    per = {k: np.empty((len(n_grid), replicas)) for k in DIAGNOSTICS}
    max_ratio = mres = cres = 0.0
    rows = []
    for g, n in enumerate(n_grid):
        for r in range(replicas):
            stats_, ratio, a, b = _replica_stats(N, int(n), beta, samples_per_replica, burn_in,
                                                 thin, children[g * replicas + r], pairs_per_config)
            for k in DIAGNOSTICS:
                per[k][g, r] = stats_[k]
            max_ratio, mres, cres = max(max_ratio, ratio), max(mres, a), max(cres, b)
            rows.append({"n": int(n), "replica": r, **stats_})
    rates = {k: fit_rate(list(n_grid), per[k], label=k) for k in DIAGNOSTICS}
    te = rates["third"]
    ok = all(v <= third_moment_bound(N, n) + 4 * s
             for n, v, s in zip(te.n_grid, te.values, te.std_errors))
    return PairSweep(N, list(n_grid), rates, max_ratio, mres, cres, ok, rows)
