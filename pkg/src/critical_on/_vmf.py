"""Compiled von Mises-Fisher draws and heat-bath sweeps.

All kernels consume a ``numpy.random.Generator`` passed in from Python, so the
caller's stream advances exactly as if the draws were made in Python.
"""
import math

import numba as nb
import numpy as np


@nb.njit(cache=True)
def _uniform_sphere(rng, out):
    N = out.shape[0]
    s = 0.0
    for a in range(N):
        out[a] = rng.standard_normal()
        s += out[a] * out[a]
    s = math.sqrt(s)
    for a in range(N):
        out[a] /= s


@nb.njit(cache=True)
def _vmf_cosine(rng, kappa, d):
    """Wood's rejection sampler for w = <x, mu> on S^d (ambient dim d+1)."""
    b = d / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + d * d))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d * math.log(1.0 - x0 * x0)
    nd = int(d)
    while True:
        # Beta(d/2, d/2) as chi2_d / (chi2_d + chi2'_d)
        p = 0.0
        q = 0.0
        for _ in range(nd):
            g1 = rng.standard_normal()
            g2 = rng.standard_normal()
            p += g1 * g1
            q += g2 * g2
        z = p / (p + q)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.random()
        if kappa * w + d * math.log(1.0 - x0 * w) - c >= math.log(u):
            return w


@nb.njit(cache=True)
def vmf_into(rng, mu_hat, kappa, out):
    """Draw one vMF(mu_hat, kappa) point into ``out``; kappa == 0 is uniform."""
    N = mu_hat.shape[0]
    if kappa <= 0.0:
        _uniform_sphere(rng, out)
        return
    w = _vmf_cosine(rng, kappa, N - 1.0)
    dot = 0.0
    for a in range(N):
        out[a] = rng.standard_normal()
        dot += out[a] * mu_hat[a]
    tn = 0.0
    for a in range(N):
        out[a] -= dot * mu_hat[a]
        tn += out[a] * out[a]
    tn = math.sqrt(tn)
    s = math.sqrt(max(0.0, 1.0 - w * w))
    nrm = 0.0
    for a in range(N):
        out[a] = w * mu_hat[a] + s * out[a] / tn
        nrm += out[a] * out[a]
    nrm = math.sqrt(nrm)
    for a in range(N):
        out[a] /= nrm


@nb.njit(cache=True)
def vmf_batch(rng, mu_hat, kappa, count):
    N = mu_hat.shape[0]
    out = np.empty((count, N))
    buf = np.empty(N)
    for k in range(count):
        vmf_into(rng, mu_hat, kappa, buf)
        for a in range(N):
            out[k, a] = buf[a]
    return out


@nb.njit(cache=True)
def heat_bath_draw(rng, spins, S, beta, i, out, mh):
    """Draw site i from its conditional law given the others (no mutation).

    ``mh`` is scratch space of length N.
    """
    n, N = spins.shape
    nrm = 0.0
    for a in range(N):
        mh[a] = (S[a] - spins[i, a]) / n
        nrm += mh[a] * mh[a]
    nrm = math.sqrt(nrm)
    if nrm == 0.0:
        _uniform_sphere(rng, out)
        return
    for a in range(N):
        mh[a] /= nrm
    vmf_into(rng, mh, beta * nrm, out)


@nb.njit(cache=True)
def heat_bath_site(rng, spins, S, beta, i):
    N = spins.shape[1]
    new = np.empty(N)
    heat_bath_draw(rng, spins, S, beta, i, new, np.empty(N))
    for a in range(N):
        S[a] += new[a] - spins[i, a]
        spins[i, a] = new[a]


@nb.njit(cache=True)
def sweeps(rng, spins, S, beta, nsweeps):
    """nsweeps * n single-site updates at uniformly random sites."""
    n, N = spins.shape
    new = np.empty(N)
    mh = np.empty(N)
    for _ in range(nsweeps * n):
        i = int(rng.random() * n)
        if i == n:
            i = n - 1
        heat_bath_draw(rng, spins, S, beta, i, new, mh)
        for a in range(N):
            S[a] += new[a] - spins[i, a]
            spins[i, a] = new[a]


@nb.njit(cache=True)
def iid_vmf_sum(rng, mu_hat, kappa, n, spins_out):
    """Fill ``spins_out`` (n, N) with iid vMF draws and return their sum."""
    N = mu_hat.shape[0]
    S = np.zeros(N)
    buf = np.empty(N)
    for i in range(n):
        vmf_into(rng, mu_hat, kappa, buf)
        for a in range(N):
            spins_out[i, a] = buf[a]
            S[a] += buf[a]
    return S


@nb.njit(cache=True)
def site_deltas(rng, spins, S, beta, sites):
    """For each listed site, the change sigma_i' - sigma_i of one heat-bath draw."""
    N = spins.shape[1]
    out = np.empty((sites.shape[0], N))
    new = np.empty(N)
    mh = np.empty(N)
    for k in range(sites.shape[0]):
        i = sites[k]
        heat_bath_draw(rng, spins, S, beta, i, new, mh)
        for a in range(N):
            out[k, a] = new[a] - spins[i, a]
    return out


@nb.njit(cache=True)
def _resum(spins, S):
    n, N = spins.shape
    drift = 0.0
    for a in range(N):
        s = 0.0
        for i in range(n):
            s += spins[i, a]
        drift = max(drift, abs(s - S[a]))
        S[a] = s
    return drift


@nb.njit(cache=True)
def run_chain(rng, spins, S, beta, burn_in, thin, count, recompute_every, since):
    """Burn in, then record S every ``thin`` sweeps ``count`` times.

    S is re-summed from the spins whenever ``recompute_every`` sweeps have
    accumulated; returns (records, max drift seen, sweeps since last resum).
    """
    N = spins.shape[1]
    rec = np.empty((count, N))
    drift = 0.0
    for _ in range(burn_in):
        sweeps(rng, spins, S, beta, 1)
        since += 1
        if since >= recompute_every:
            drift = max(drift, _resum(spins, S))
            since = 0
    for k in range(count):
        for _ in range(thin):
            sweeps(rng, spins, S, beta, 1)
            since += 1
            if since >= recompute_every:
                drift = max(drift, _resum(spins, S))
                since = 0
        for a in range(N):
            rec[k, a] = S[a]
    return rec, drift, since
