"""Mean-field O(N) spin configurations and the single-site heat-bath chain.

The Gibbs weight of a configuration sigma of n unit vectors in R^N is
``exp(beta |S|^2 / (2n))`` with ``S = sum_i sigma_i``. Resampling site i from
its conditional law gives a von Mises-Fisher draw with concentration
``beta |m_(i)|`` around ``m_(i) = (S - sigma_i)/n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import _vmf
from .errors import DomainError
from .specfun import f_and_g

RECOMPUTE_EVERY = 1000
DEFAULT_BURN_IN = 1000
DEFAULT_THIN = 10


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class SpinConfig:
    """n unit spins in R^N at inverse temperature beta.

    The running sum S is updated incrementally by the chain and re-summed
    from scratch every ``RECOMPUTE_EVERY`` sweeps; the largest discrepancy
    seen at a re-sum is kept in ``max_drift``.
    """

    def __init__(self, spins, beta: float):
        spins = np.array(spins, dtype=float, ndmin=2)
        if spins.ndim != 2:
            raise DomainError("spins must be an (n, N) array")
        n, N = spins.shape
        if N < 2 or n < 1:
            raise DomainError(f"need N >= 2 and n >= 1, got N={N}, n={n}")
        if not beta >= 0:
            raise DomainError("beta must be nonnegative")
        norms = np.linalg.norm(spins, axis=1)
        if np.any(norms == 0):
            raise DomainError("zero spin vector")
        self._spins = np.ascontiguousarray(spins / norms[:, None])
        self._N = N
        self._n = n
        self.beta = float(beta)
        self._S = self._spins.sum(axis=0)
        self.sweeps_done = 0
        self._since_resum = 0
        self.max_drift = 0.0

    @property
    def N(self) -> int:
        return self._N

    @property
    def n(self) -> int:
        return self._n

    @property
    def spins(self) -> np.ndarray:
        return self._spins

    @property
    def running_S(self) -> np.ndarray:
        return self._S.copy()

    @classmethod
    def uniform(cls, N: int, n: int, beta: float, rng=None):
        rng = _as_rng(rng)
        return cls(rng.standard_normal((n, N)), beta)

    @classmethod
    def aligned(cls, N: int, n: int, beta: float, direction=None):
        d = np.zeros(N) if direction is None else np.asarray(direction, float)
        if direction is None:
            d[0] = 1.0
        return cls(np.tile(d, (n, 1)), beta)

    def copy(self) -> "SpinConfig":
        c = SpinConfig(self._spins.copy(), self.beta)
        c._S = self._S.copy()
        c.sweeps_done = self.sweeps_done
        c._since_resum = self._since_resum
        c.max_drift = self.max_drift
        return c

    def resum(self) -> float:
        fresh = self._spins.sum(axis=0)
        d = float(np.max(np.abs(fresh - self._S)))
        self._S = fresh
        self.max_drift = max(self.max_drift, d)
        self._since_resum = 0
        return d

    def max_norm_error(self) -> float:
        return float(np.max(np.abs(np.linalg.norm(self._spins, axis=1) - 1.0)))


@dataclass(frozen=True)
class MagnetizationView:
    """Magnetization observables of one configuration (S freshly summed)."""

    spins: np.ndarray
    S: np.ndarray
    W: np.ndarray
    m: np.ndarray
    beta: float = float("nan")

    @property
    def n(self) -> int:
        return self.spins.shape[0]

    @property
    def N(self) -> int:
        return self.spins.shape[1]

    def leave_one_out(self, i: int) -> np.ndarray:
        return (self.S - self.spins[i]) / self.n

    def leave_one_out_all(self) -> np.ndarray:
        return (self.S[None, :] - self.spins) / self.n


def view_from_spins(spins, beta: float = float("nan")) -> MagnetizationView:
    spins = np.asarray(spins, dtype=float)
    n = spins.shape[0]
    S = spins.sum(axis=0)
    return MagnetizationView(spins=spins, S=S, W=S * n ** -0.75, m=S / n, beta=beta)


def magnetization(config: SpinConfig, copy: bool = True) -> MagnetizationView:
    sp = config.spins.copy() if copy else config.spins
    return view_from_spins(sp, config.beta)


def heat_bath_step(config: SpinConfig, site: int, rng) -> SpinConfig:
    if not 0 <= site < config.n:
        raise IndexError(f"site {site} out of range for n={config.n}")
    _vmf.heat_bath_site(_as_rng(rng), config._spins, config._S, config.beta, int(site))
    return config


def sweep(config: SpinConfig, rng, count: int = 1) -> SpinConfig:
    """``count`` sweeps of n heat-bath steps at uniformly random sites."""
    rng = _as_rng(rng)
    left = int(count)
    while left > 0:
        chunk = min(left, RECOMPUTE_EVERY - config._since_resum)
        _vmf.sweeps(rng, config._spins, config._S, config.beta, chunk)
        config.sweeps_done += chunk
        config._since_resum += chunk
        left -= chunk
        if config._since_resum >= RECOMPUTE_EVERY:
            config.resum()
    return config


def resample_site(config: SpinConfig, site: int, count: int, rng) -> np.ndarray:
    """``count`` independent heat-bath draws for ``site``; the config is untouched."""
    sites = np.full(int(count), int(site), dtype=np.int64)
    d = _vmf.site_deltas(_as_rng(rng), config._spins, config._S, config.beta, sites)
    return d + config.spins[site]


def heat_bath_resamples(N: int, m_loo, beta: float, count: int, rng) -> np.ndarray:
    """``count`` independent draws of one spin whose surroundings have mean m_loo."""
    m_loo = np.asarray(m_loo, dtype=float)
    r = float(np.linalg.norm(m_loo))
    mu = np.zeros(N) if r == 0 else m_loo / r
    if r == 0:
        mu[0] = 1.0
    return _vmf.vmf_batch(_as_rng(rng), mu, beta * r, int(count))


def vmf_mean_resultant(N: int, kappa):
    """A(kappa) = I_{N/2}(kappa) / I_{N/2-1}(kappa), the vMF mean resultant length."""
    kappa = np.asarray(kappa, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = special.ive(N / 2.0, kappa) / special.ive(N / 2.0 - 1.0, kappa)
    return np.where(kappa == 0, 0.0, out)


def conditional_moments(N: int, beta: float, m_loo):
    """Mean and second moment of a heat-bath draw given m_(i).

    At beta = N these reduce to ``f_N(|m|) m`` and ``f_N/N I + g_N m m^T``;
    that form is used there, and the general vMF form elsewhere.
    """
    m_loo = np.asarray(m_loo, dtype=float)
    x = float(np.linalg.norm(m_loo))
    if beta == N:
        f, g = f_and_g(N, x)
        return f * m_loo, (f / N) * np.eye(N) + g * np.outer(m_loo, m_loo)
    kappa = beta * x
    if kappa == 0:
        return np.zeros(N), np.eye(N) / N
    A = float(vmf_mean_resultant(N, kappa))
    mu = m_loo / x
    return A * mu, (A / kappa) * np.eye(N) + (1.0 - N * A / kappa) * np.outer(mu, mu)


def _start(N, n, beta, rng, start):
    if start == "uniform":
        return SpinConfig.uniform(N, n, beta, rng)
    if start == "aligned":
        return SpinConfig.aligned(N, n, beta)
    raise DomainError(f"unknown start {start!r}")


def equilibrium_stream(N: int, n: int, beta: float, burn_in: int = DEFAULT_BURN_IN,
                       thin: int = DEFAULT_THIN, count: int = 1, seed=0, start="uniform"):
    """Yield ``count`` MagnetizationViews, one every ``thin`` sweeps after burn-in."""
    if burn_in < 1 or thin < 1:
        raise DomainError("burn_in and thin must be >= 1")
    rng = np.random.default_rng(seed)
    cfg = _start(N, n, beta, rng, start)
    sweep(cfg, rng, burn_in)
    for _ in range(count):
        sweep(cfg, rng, thin)
        yield magnetization(cfg)


@dataclass
class ChainSample:
    """Recorded magnetizations S (rows) with the replica index of each row."""

    N: int
    n: int
    beta: float
    S: np.ndarray
    replica: np.ndarray
    sweep_index: np.ndarray
    max_drift: float
    meta: dict = field(default_factory=dict)

    @property
    def W(self) -> np.ndarray:
        return self.S * self.n ** -0.75

    @property
    def m(self) -> np.ndarray:
        return self.S / self.n


def _split(count, replicas):
    base, extra = divmod(count, replicas)
    return [base + (1 if r < extra else 0) for r in range(replicas)]


def sample_magnetization(N: int, n: int, beta: float, count: int, seed=0,
                         burn_in: int = DEFAULT_BURN_IN, thin: int = DEFAULT_THIN,
                         replicas: int = 1, start="uniform") -> ChainSample:
    """Magnetization samples from ``replicas`` independent chains.

    Replica r uses the r-th child of ``SeedSequence(seed)``; the rows are
    concatenated in replica order so the result does not depend on how the
    replicas are scheduled.
    """
    if burn_in < 1 or thin < 1:
        raise DomainError("burn_in and thin must be >= 1")
    children = np.random.SeedSequence(seed).spawn(replicas)
    recs, reps, idx = [], [], []
    drift = 0.0
    for r, (ss, c) in enumerate(zip(children, _split(count, replicas))):
        if c == 0:
            continue
        rng = np.random.default_rng(ss)
        cfg = _start(N, n, beta, rng, start)
        rec, d, since = _vmf.run_chain(rng, cfg._spins, cfg._S, float(beta),
                                       int(burn_in), int(thin), int(c), RECOMPUTE_EVERY, 0)
        drift = max(drift, d, cfg.resum())
        recs.append(rec)
        reps.append(np.full(c, r))
        idx.append(burn_in + thin * np.arange(1, c + 1))
    return ChainSample(N, n, float(beta), np.concatenate(recs), np.concatenate(reps),
                       np.concatenate(idx), drift,
                       meta={"sampler": "chain", "burn_in": burn_in, "thin": thin})


# ---------------------------------------------------------------------------
# Exact Gibbs sampling through a Gaussian auxiliary field.
#
# With z ~ N(0, I_N) independent of sigma, exp(beta|S|^2/(2n)) = E exp(c<z,S>)
# for c = sqrt(beta/n). The joint law of (z, sigma) has z-marginal with radial
# density r^(N-1) exp(-r^2/2) U_{N/2-1}(c r)^n, and given z the spins are iid
# vMF(z/|z|, c|z|). This gives independent exact draws, used as an oracle for
# the chain's stationary law.
# ---------------------------------------------------------------------------

def _log_u(nu, x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    xp = x[pos]
    out[pos] = (special.gammaln(nu + 1.0) + nu * np.log(2.0 / xp)
                + np.log(special.ive(nu, xp)) + xp)
    return out


class _RadialTable:
    def __init__(self, N, n, beta, points=8001):
        c = math.sqrt(beta / n)
        nu = N / 2.0 - 1.0

        def logp(r):
            with np.errstate(divide="ignore"):
                lr = np.where(r > 0, (N - 1) * np.log(np.maximum(r, 1e-300)), -np.inf)
            return lr - 0.5 * r * r + n * _log_u(nu, c * r)

        hi = math.sqrt(beta * n) * 1.2 + 15.0
        coarse = np.linspace(0.0, hi, 4001)
        lp = logp(coarse)
        keep = np.nonzero(lp > lp.max() - 45.0)[0]
        lo_r = coarse[max(keep[0] - 1, 0)]
        hi_r = coarse[min(keep[-1] + 1, len(coarse) - 1)]
        r = np.linspace(lo_r, hi_r, points)
        p = np.exp(logp(r) - lp.max())
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(r))])
        self.r = r
        self.cdf = cdf / cdf[-1]
        self.c = c

    def draw(self, rng, size):
        u = rng.random(size)
        return np.interp(u, self.cdf, self.r)


def exact_gibbs_sample(N: int, n: int, beta: float, count: int, seed=0,
                       return_spins: bool = False):
    """Independent exact Gibbs draws of S (and optionally the spins)."""
    rng = np.random.default_rng(seed)
    table = _RadialTable(N, n, float(beta))
    radii = table.draw(rng, count)
    S = np.empty((count, N))
    spins_out = np.empty((n, N))
    all_spins = np.empty((count, n, N)) if return_spins else None
    for k in range(count):
        d = rng.standard_normal(N)
        d /= np.linalg.norm(d)
        S[k] = _vmf.iid_vmf_sum(rng, d, table.c * radii[k], n, spins_out)
        if return_spins:
            all_spins[k] = spins_out
    cs = ChainSample(N, n, float(beta), S, np.zeros(count, dtype=int), np.arange(count), 0.0,
                     meta={"sampler": "exact"})
    return (cs, all_spins) if return_spins else cs
