"""Overdamped Langevin dynamics dX = -grad V(X) dt + sqrt(2) dB with its
first, second and third variation processes, semigroup estimators and the
Elworthy-Li derivative formulas.

Everything is advanced by Euler-Maruyama on one fixed grid. The variation
recursions are explicit Euler steps evaluated at the same left point as the
state update, so they are the exact derivatives of the discrete flow map: a
central difference of that map under common noise reproduces them to O(eps^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .constants import ErgodicityConstants, PotentialSpec
from .errors import (BoundViolated, DomainError, NestingBudgetError, StepSizeError,
                     TailBudgetError)
from .limit_laws import RadialLaw, TestFunction, mu_expectation, sample_law  # noqa: F401
from .transport import w1_exact

DEFAULT_DT = 1e-3
# dt * (largest Hessian eigenvalue at x0) must not exceed this
STEP_CURVATURE_MAX = 0.05
# explicit Euler for the variations is contractive only while dt * lambda_max <= 2
STABILITY_LIMIT = 2.0
DEFAULT_BOX = 100.0
DEFAULT_INNER = 100
DEFAULT_INNER2 = 20
DEFAULT_NESTING_CAP = 10 ** 7
DEFAULT_S_STRIDE = 10
# the first variation equation has exact third-order coefficient 1/2 over permutations
SYM_WEIGHT = 0.5
CHUNK_ELEMENTS = 4_000_000


@dataclass
class LangevinPath:
    """Recorded trajectories; arrays are indexed (record, replica, coordinate)."""

    spec: PotentialSpec
    x0: np.ndarray
    dt: float
    steps: int
    times: np.ndarray
    X: np.ndarray
    U1: dict
    U2: dict
    U3: dict
    I_sum: dict
    rho_int: np.ndarray
    noise_seed: object
    directions: dict
    max_curvature: float
    sym_weight: float = SYM_WEIGHT
    record_index: np.ndarray = field(default=None, repr=False)
    integrals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def replicas(self) -> int:
        return self.X.shape[1]

    @property
    def eps_disc(self) -> float:
        return 10.0 * self.dt * self.max_curvature

    def I(self, name) -> np.ndarray:
        """I_u(t) = (1/(sqrt 2 t)) int_0^t <U_u(s), dB_s> at each recorded time (0 at t = 0)."""
        t = self.times[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.I_sum[name] / (math.sqrt(2.0) * t)
        out[self.times == 0] = 0.0
        return out


def _as_points(x0, dim, replicas):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        if x0.shape[0] != dim:
            raise DomainError(f"x0 has dimension {x0.shape[0]}, potential has {dim}")
        return np.tile(x0, (replicas, 1))
    if x0.ndim != 2 or x0.shape[1] != dim:
        raise DomainError("x0 must be a vector or a (replicas, dim) array")
    return x0.copy()


def _as_dirs(dirs, R, d):
    """(K, d) or (K, R, d) -> (K, R, d)."""
    D = np.asarray(dirs, dtype=float)
    if D.ndim == 2:
        D = np.broadcast_to(D[:, None, :], (D.shape[0], R, d))
    if D.ndim != 3 or D.shape[1:] != (R, d):
        raise DomainError("directions must have shape (K, dim) or (K, replicas, dim)")
    return np.array(D)


def _integrate(spec, X0, dt, steps, dirs, pairs, triples, rng, record, sym_weight, box, noise,
               integrands=(), substeps=1, rng_fine=None):
    """Core Euler-Maruyama loop; returns recorded arrays.

    ``pairs`` are index pairs into dirs (order kept, so (b, a) is a separate
    U2 run); ``triples`` need U2 for each of their sub-pairs, which are added
    internally in canonical order. ``integrands`` are functions of X whose
    time integrals are accumulated by the trapezoid rule (rho always first).
    With ``substeps = 2`` each grid step is split in two halves whose noise
    increments sum to the increment the ``substeps = 1`` run would use.
    """
    R, d = X0.shape
    K = dirs.shape[0]
    pairs = [tuple(p) for p in pairs]
    all_pairs = list(pairs)
    for a, b, c in triples:
        for p in ((a, b), (a, c), (b, c)):
            if p not in all_pairs and p[::-1] not in all_pairs:
                all_pairs.append(p)
    pidx = {p: j for j, p in enumerate(all_pairs)}

    def pair_of(a, b):
        return pidx[(a, b)] if (a, b) in pidx else pidx[(b, a)]

    if substeps not in (1, 2):
        raise DomainError("substeps must be 1 or 2")
    if substeps == 2 and rng_fine is None:
        raise DomainError("substeps = 2 needs a second generator")
    funcs = (spec.rho,) + tuple(integrands)
    P, T, F = len(all_pairs), len(triples), len(funcs)
    X = X0.copy()
    U1 = dirs.copy()
    U2 = np.zeros((P, R, d))
    U3 = np.zeros((T, R, d))
    Isum = np.zeros((K, R))
    ints = np.zeros((F, R))
    prev = np.stack([f(X) for f in funcs])
    pa = np.array([p[0] for p in all_pairs], dtype=int)
    pb = np.array([p[1] for p in all_pairs], dtype=int)
    ta = np.array([t[0] for t in triples], dtype=int)
    tb = np.array([t[1] for t in triples], dtype=int)
    tc = np.array([t[2] for t in triples], dtype=int)
    t_bc = np.array([pair_of(b, c) for _, b, c in triples], dtype=int)
    t_ac = np.array([pair_of(a, c) for a, _, c in triples], dtype=int)
    t_ab = np.array([pair_of(a, b) for a, b, _ in triples], dtype=int)

    rec_set = set(int(k) for k in record)
    n_rec = len(record)
    out_X = np.empty((n_rec, R, d))
    out_U1 = np.empty((n_rec, K, R, d))
    out_U2 = np.empty((n_rec, P, R, d))
    out_U3 = np.empty((n_rec, T, R, d))
    out_I = np.empty((n_rec, K, R))
    out_int = np.empty((n_rec, F, R))
    sq2 = math.sqrt(2.0)
    h = dt / substeps
    max_curv = 0.0

    def curvature(X):
        if spec.curvature is not None:
            return float(np.max(spec.curvature(X)))
        return spec.curvature_at(X[0])

    j = 0
    for k in range(steps + 1):
        if k in rec_set:
            out_X[j], out_U1[j], out_U2[j], out_U3[j] = X, U1, U2, U3
            out_I[j], out_int[j] = Isum, ints
            j += 1
        if k == steps:
            break
        if noise:
            dB = rng.standard_normal((R, d)) * math.sqrt(dt)
            if substeps == 2:
                split = rng_fine.standard_normal((R, d)) * (0.5 * math.sqrt(dt))
                incs = (0.5 * dB + split, 0.5 * dB - split)
            else:
                incs = (dB,)
        else:
            incs = (np.zeros((R, d)),) * substeps
        for dBs in incs:
            curv = curvature(X)
            max_curv = max(max_curv, curv)
            if h * curv > STABILITY_LIMIT:
                raise StepSizeError(f"dt * curvature = {h * curv:.3g} exceeds {STABILITY_LIMIT} at step {k}")
            # all increments at the left point
            if T:
                mixed = (spec.d3_action(X, U1[ta], U2[t_bc]) + spec.d3_action(X, U1[tb], U2[t_ac])
                         + spec.d3_action(X, U1[tc], U2[t_ab]))
                dU3 = -spec.hess_action(X, U3) - 2.0 * sym_weight * mixed \
                    - spec.d4_action(X, U1[ta], U1[tb], U1[tc])
                U3 = U3 + h * dU3
            if P:
                U2 = U2 + h * (-spec.hess_action(X, U2) - spec.d3_action(X, U1[pa], U1[pb]))
            if K:
                Isum = Isum + np.sum(U1 * dBs, axis=-1)
                U1 = U1 - h * spec.hess_action(X, U1)
            X = X - h * spec.grad(X) + sq2 * dBs
            if not np.all(np.isfinite(X)) or float(np.max(np.sum(X * X, axis=-1))) > box * box:
                raise StepSizeError(f"path left the box |x| <= {box} at step {k + 1}; reduce dt")
            cur = np.stack([f(X) for f in funcs])
            ints = ints + 0.5 * h * (prev + cur)
            prev = cur
    max_curv = max(max_curv, curvature(X))
    return out_X, out_U1, out_U2, out_U3, out_I, out_int, all_pairs, max_curv


def _record_steps(steps, record_every):
    rec = list(range(0, steps + 1, max(1, int(record_every))))
    if rec[-1] != steps:
        rec.append(steps)
    return np.array(rec, dtype=int)


def _n_steps(T, dt):
    if not dt > 0:
        raise DomainError("dt must be positive")
    steps = int(round(T / dt))
    if T < 0 or (T > 0 and steps < 1):
        raise DomainError("need T >= dt")
    if abs(steps * dt - T) > 1e-9 * max(T, dt):
        raise DomainError(f"T = {T} is not a multiple of dt = {dt}")
    return steps


def _check_start(spec, X0, dt):
    curv = float(np.max(spec.curvature(X0))) if spec.curvature is not None else spec.curvature_at(X0[0])
    if dt * max(curv, 0.0) > STEP_CURVATURE_MAX:
        raise StepSizeError(f"dt = {dt} too large for curvature {curv:.3g} at x0 "
                            f"(need dt * curvature <= {STEP_CURVATURE_MAX})")


def simulate(spec: PotentialSpec, x0, dt: float = DEFAULT_DT, T: float = 1.0, directions=None,
             seed=0, replicas: int = 1, pairs=None, triples=None, record_every: int = 1,
             noise: bool = True, box: float = DEFAULT_BOX, sym_weight: float = SYM_WEIGHT,
             check_start: bool = True, refine: int = 1, integrands=()) -> LangevinPath:
    """Simulate X and its variations on the grid k*dt, k = 0..T/dt.

    ``directions`` maps names to vectors (or an ordered list, named u, v, w).
    By default U2 is computed for every pair of distinct names in order and
    U3 for the first three names; pass ``pairs``/``triples`` as name tuples
    to choose explicitly. ``refine = 2`` integrates with step dt/2 driven by
    the same Brownian path as the ``refine = 1`` run (a Richardson audit).
    """
    steps = _n_steps(T, dt)
    X0 = _as_points(x0, spec.dim, replicas)
    R, d = X0.shape
    if check_start:
        _check_start(spec, X0, dt)
    if directions is None:
        directions = {}
    if not isinstance(directions, dict):
        directions = dict(zip("uvw", directions))
    names = list(directions)
    dirs = _as_dirs([directions[k] for k in names], R, d) if names else np.zeros((0, R, d))
    if pairs is None:
        pairs = list(combinations(names, 2))
    if triples is None:
        triples = [tuple(names[:3])] if len(names) >= 3 else []
    ix = {k: i for i, k in enumerate(names)}
    ipairs = [(ix[a], ix[b]) for a, b in pairs]
    itriples = [tuple(ix[a] for a in t) for t in triples]
    rec = _record_steps(steps, record_every)
    rng = np.random.default_rng(seed)
    rng_fine = np.random.default_rng(_seed_child(seed, 99)) if refine == 2 else None
    X, U1, U2, U3, I, ints, all_pairs, max_curv = _integrate(
        spec, X0, dt, steps, dirs, ipairs, itriples, rng, rec, sym_weight, box, noise,
        integrands, refine, rng_fine)
    U1d = {k: U1[:, i] for k, i in ix.items()}
    U2d = {(names[a], names[b]): U2[:, j] for j, (a, b) in enumerate(all_pairs)}
    U3d = {tuple(t): U3[:, j] for j, t in enumerate(triples)}
    Id = {k: I[:, i] for k, i in ix.items()}
    return LangevinPath(spec=spec, x0=X0[0].copy() if replicas == 1 else X0, dt=dt, steps=steps,
                        times=rec * dt, X=X, U1=U1d, U2=U2d, U3=U3d, I_sum=Id, rho_int=ints[:, 0],
                        integrals=ints[:, 1:],
                        noise_seed=seed, directions=dict(directions), max_curvature=max_curv,
                        sym_weight=sym_weight, record_index=rec)


def _run_batch(spec, X0, dt, T, dirs, pairs, triples, seed, record_every=None, check_start=True,
               integrands=(), refine=1):
    """Array-level simulate for internal estimators (dirs as (K, R, d) or (K, d))."""
    steps = _n_steps(T, dt)
    R, d = X0.shape
    if check_start:
        _check_start(spec, X0, dt)
    D = _as_dirs(dirs, R, d) if len(dirs) else np.zeros((0, R, d))
    rec = _record_steps(steps, steps if record_every is None else record_every)
    fine = np.random.default_rng(_seed_child(seed, 99)) if refine == 2 else None
    out = _integrate(spec, X0, dt, steps, D, pairs, triples, np.random.default_rng(seed), rec,
                     SYM_WEIGHT, DEFAULT_BOX, True, integrands, refine, fine)
    return rec * dt, out


# ---------------------------------------------------------------------------
# semigroup and derivative estimators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    replicas: int

    def as_dict(self):
        return {"value": self.value, "std_error": self.std_error, "replicas": self.replicas}


@dataclass(frozen=True)
class DerivativeEstimate:
    order: int
    value: float
    std_error: float
    directions: tuple
    t: float
    x: tuple
    replicas: int
    inner_replicas: Optional[int] = None
    method: str = "elworthy_li"

    def as_dict(self):
        return {"order": self.order, "value": self.value, "std_error": self.std_error,
                "directions": [list(map(float, u)) for u in self.directions], "t": self.t,
                "x": list(self.x), "replicas": self.replicas,
                "inner_replicas": self.inner_replicas, "method": self.method}


def _mean_se(vals) -> tuple:
    vals = np.asarray(vals, dtype=float)
    n = vals.size
    # the delete-one jackknife SE of a sample mean equals std(ddof=1)/sqrt(n)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def estimate_pt(spec: PotentialSpec, h: TestFunction, x, t: float, replicas: int = 1000,
                seed=0, dt: float = DEFAULT_DT) -> Estimate:
    """Monte Carlo P_t h(x) = E h(X_t^x)."""
    if replicas < 2:
        raise DomainError("replicas must be >= 2")
    x = np.asarray(x, dtype=float)
    if t == 0:
        return Estimate(float(h(x)), 0.0, replicas)
    _, out = _run_batch(spec, _as_points(x, spec.dim, replicas), dt, t, [], [], [], seed)
    m, se = _mean_se(h(out[0][-1]))
    return Estimate(m, se, replicas)


def _seed_child(seed, *path):
    """Deterministic sub-seed: SeedSequence with a spawn key."""
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + tuple(path))


def _chunks(P, per_point):
    size = max(1, CHUNK_ELEMENTS // max(per_point, 1))
    return [(i, min(P, i + size)) for i in range(0, P, size)]


def _grad_pt(spec, h, Y, tau, inner, seed, dt):
    """Nested estimate of grad P_tau h at each row of Y (P, d), via E[J^T grad h(X_tau)]."""
    P, d = Y.shape
    G = np.empty((P, d))
    for c, (lo, hi) in enumerate(_chunks(P, inner * d * (d + 2))):
        X0 = np.repeat(Y[lo:hi], inner, axis=0)
        _, out = _run_batch(spec, X0, dt, tau, np.eye(d), [], [], _seed_child(seed, c),
                            check_start=False)
        XT, U1 = out[0][-1], out[1][-1]
        gh = h.grad_h(XT)
        vals = np.einsum("rd,krd->rk", gh, U1)
        G[lo:hi] = vals.reshape(hi - lo, inner, d).mean(axis=1)
    return G


def _trapz(y, x, axis=0):
    return np.trapezoid(y, x, axis=axis) if hasattr(np, "trapezoid") else np.trapz(y, x, axis=axis)


def _bel2_paths(spec, h, X0, t, dirs, pairs, inner, seed, dt, s_stride, grad_fn=None):
    """Per-path second-order Elworthy-Li integrand for each (a, b) in ``pairs``.

    Returns (len(pairs), R):
        <grad P_{t/2}h(X_{t/2}), U_a(t/2)> I_b(t/2)
        + (2/t) int_0^{t/2} <grad P_{t-s}h(X_s), U_ab(s)> ds
    """
    half = t / 2.0
    times, out = _run_batch(spec, X0, dt, half, dirs, pairs, [], _seed_child(seed, 0),
                            record_every=s_stride, check_start=False)
    X, U1, U2, I_sum = out[0], out[1], out[2], out[4]
    all_pairs = out[6]
    grad_fn = grad_fn or (lambda Y, tau, sd: _grad_pt(spec, h, Y, tau, inner, sd, dt))
    G = [grad_fn(X[j], t - s, _seed_child(seed, 1, j)) for j, s in enumerate(times)]
    G_half = G[-1]
    Ib = I_sum[-1] / (math.sqrt(2.0) * half)
    res = []
    for a, b in pairs:
        j = all_pairs.index((a, b))
        first = np.sum(G_half * U1[-1][a], axis=-1) * Ib[b]
        integrand = np.stack([np.sum(G[i] * U2[i][j], axis=-1) for i in range(len(times))])
        res.append(first + (2.0 / t) * _trapz(integrand, times))
    return np.array(res)


def _hess_pt(spec, h, Y, tau, inner, inner2, seed, dt, s_stride):
    """Nested estimate of the Hessian of P_tau h at each row of Y via the order-2 formula."""
    P, d = Y.shape
    pairs = [(i, j) for i in range(d) for j in range(d)]
    H = np.empty((P, d, d))
    for c, (lo, hi) in enumerate(_chunks(P, inner * d * (d * d + d + 2))):
        X0 = np.repeat(Y[lo:hi], inner, axis=0)
        vals = _bel2_paths(spec, h, X0, tau, np.eye(d), pairs, inner2, _seed_child(seed, c), dt, s_stride)
        Hc = vals.reshape(d, d, hi - lo, inner).mean(axis=-1)
        Hc = np.moveaxis(Hc, -1, 0)
        H[lo:hi] = 0.5 * (Hc + np.swapaxes(Hc, 1, 2))
    return H


def _check_budget(order, replicas, inner, inner2, cap):
    cost = replicas * (inner if order >= 2 else 1) * (inner2 if order == 3 else 1)
    if cost > cap:
        raise NestingBudgetError(f"order-{order} nested cost {cost} exceeds cap {cap}")


def _unit_grid_ok(t, dt):
    half = t / 2.0
    if abs(round(half / dt) * dt - half) > 1e-9 * max(half, dt) or round(half / dt) < 1:
        raise DomainError("t/2 must be a positive multiple of dt")


def elworthy_li(spec: PotentialSpec, h: TestFunction, x, t: float, order: int, directions,
                replicas: int = 1000, seed=0, dt: float = DEFAULT_DT, inner: int = DEFAULT_INNER,
                inner2: int = DEFAULT_INNER2, s_stride: int = DEFAULT_S_STRIDE,
                cost_cap: int = DEFAULT_NESTING_CAP, k4_pairing: str = "derived") -> DerivativeEstimate:
    """D^order P_t h(x)[directions] by the Elworthy-Li representations.

    Order 1 is the chain rule E<grad h(X_t), U_u(t)>. Orders 2 and 3 nest
    inner Monte Carlo estimates of D P h and D^2 P h at the outer states;
    each outer replica's contribution is linear in its inner estimates, so
    the nested estimator is unbiased and its SE comes from the outer replicas.
    """
    if not t > 0:
        raise DomainError("t must be positive")
    if order not in (1, 2, 3):
        raise DomainError("order must be 1, 2 or 3")
    if h.grad_h is None:
        raise DomainError("the test function needs grad_h")
    if order >= 2 and not h.smooth:
        raise DomainError("orders 2 and 3 need a smooth test function")
    if replicas < 2:
        raise DomainError("replicas must be >= 2")
    dirs = [np.asarray(u, dtype=float) for u in directions]
    if len(dirs) < order:
        raise DomainError(f"order {order} needs {order} directions")
    dirs = dirs[:order]
    _check_budget(order, replicas, inner, inner2, cost_cap)
    x = np.asarray(x, dtype=float)
    X0 = _as_points(x, spec.dim, replicas)
    _check_start(spec, X0, dt)
    if order == 1:
        _, out = _run_batch(spec, X0, dt, t, dirs, [], [], seed, check_start=False)
        vals = np.sum(h.grad_h(out[0][-1]) * out[1][-1][0], axis=-1)
        inner_used = None
    elif order == 2:
        _unit_grid_ok(t, dt)
        vals = _bel2_paths(spec, h, X0, t, dirs, [(0, 1)], inner, seed, dt, s_stride)[0]
        inner_used = inner
    else:
        _unit_grid_ok(t, dt)
        vals = _bel3_paths(spec, h, X0, t, dirs, inner, inner2, seed, dt, s_stride, k4_pairing)
        inner_used = inner
    m, se = _mean_se(vals)
    return DerivativeEstimate(order, m, se, tuple(tuple(u) for u in dirs), float(t),
                              tuple(map(float, x)), replicas, inner_used)


def _bel3_paths(spec, h, X0, t, dirs, inner, inner2, seed, dt, s_stride, k4_pairing="derived",
                parts=False):
    """Per-path third-order integrand K1 + K2 + K3 + (two K4 terms).

    With K4(a, b, c) = (2/t) int D^2 P_{t-s}h(X_s)[U_ab(s), U_c(s)] ds, the
    ``derived`` pairing uses K4(u,w,v) + K4(v,w,u), which is what differentiating
    the order-2 formula in w produces. ``printed`` uses K4(u,v,w) + K4(v,u,w).
    """
    if k4_pairing not in ("derived", "printed"):
        raise DomainError("k4_pairing must be 'derived' or 'printed'")
    half = t / 2.0
    pairs = [(0, 1), (0, 2), (1, 2)]
    times, out = _run_batch(spec, X0, dt, half, dirs, pairs, [(0, 1, 2)], _seed_child(seed, 0),
                            record_every=s_stride, check_start=False)
    X, U1, U2, U3, I_sum = out[0], out[1], out[2], out[3], out[4]
    all_pairs = out[6]
    Iw = I_sum[-1][2] / (math.sqrt(2.0) * half)
    G = [_grad_pt(spec, h, X[j], t - s, inner, _seed_child(seed, 1, j), dt) for j, s in enumerate(times)]
    H = [_hess_pt(spec, h, X[j], t - s, inner, inner2, _seed_child(seed, 2, j), dt, s_stride)
         for j, s in enumerate(times)]
    Uu, Uv, Uw = U1[:, 0], U1[:, 1], U1[:, 2]
    Uuv, Uuw, Uvw = (U2[:, all_pairs.index(p)] for p in pairs)
    quad = lambda A, M, B: np.einsum("ri,rij,rj->r", A, M, B)
    K1 = quad(Uu[-1], H[-1], Uv[-1]) * Iw
    K2 = np.sum(G[-1] * Uuv[-1], axis=-1) * Iw
    idx = range(len(times))
    K3 = (2.0 / t) * _trapz(np.stack([np.sum(G[i] * U3[i][0], axis=-1) for i in idx]), times)
    if k4_pairing == "derived":
        k4a = np.stack([quad(Uuw[i], H[i], Uv[i]) for i in idx])
        k4b = np.stack([quad(Uvw[i], H[i], Uu[i]) for i in idx])
    else:
        k4a = k4b = np.stack([quad(Uuv[i], H[i], Uw[i]) for i in idx])
    K4a = (2.0 / t) * _trapz(k4a, times)
    K4b = (2.0 / t) * _trapz(k4b, times)
    total = K1 + K2 + K3 + K4a + K4b
    if parts:
        return total, {"K1": K1, "K2": K2, "K3": K3, "K4a": K4a, "K4b": K4b}
    return total


def pathwise_derivative(spec: PotentialSpec, h: TestFunction, x, t: float, order: int, directions,
                        replicas: int = 1000, seed=0, dt: float = DEFAULT_DT) -> DerivativeEstimate:
    """Chain-rule derivative of P_t h using the higher derivatives of h.

    D^2: E[D^2h(X)[U_u, U_v] + <grad h(X), U_uv>]; D^3 adds the three mixed
    Hessian terms, D^3h and U_uvw. An independent route next to Elworthy-Li.
    """
    if order not in (1, 2, 3):
        raise DomainError("order must be 1, 2 or 3")
    need = {1: h.grad_h, 2: h.hess_h, 3: h.d3_h}[order]
    if need is None:
        raise DomainError("the test function lacks the derivatives this order needs")
    dirs = [np.asarray(u, dtype=float) for u in directions][:order]
    X0 = _as_points(x, spec.dim, replicas)
    pairs = [(0, 1)] if order == 2 else []
    triples = [(0, 1, 2)] if order == 3 else []
    _, out = _run_batch(spec, X0, dt, t, dirs, pairs, triples, seed)
    XT, U1, U2, U3, all_pairs = out[0][-1], out[1][-1], out[2][-1], out[3][-1], out[6]
    gh = h.grad_h(XT)
    if order == 1:
        vals = np.sum(gh * U1[0], axis=-1)
    elif order == 2:
        vals = h.hess_h(XT, U1[0], U1[1]) + np.sum(gh * U2[0], axis=-1)
    else:
        P = {p: U2[j] for j, p in enumerate(all_pairs)}
        vals = (h.d3_h(XT, U1[0], U1[1], U1[2]) + h.hess_h(XT, P[(0, 1)], U1[2])
                + h.hess_h(XT, P[(0, 2)], U1[1]) + h.hess_h(XT, P[(1, 2)], U1[0])
                + np.sum(gh * U3[0], axis=-1))
    m, se = _mean_se(vals)
    return DerivativeEstimate(order, m, se, tuple(tuple(u) for u in dirs), float(t),
                              tuple(map(float, np.asarray(x, dtype=float))), replicas, None, "pathwise")


# ---------------------------------------------------------------------------
# decay and moment checks
# ---------------------------------------------------------------------------

def decay_E(spec: PotentialSpec, x, s: float, t: float, replicas: int = 1000, seed=0,
            dt: float = DEFAULT_DT) -> Estimate:
    """Monte Carlo of E exp(-2 int_s^t rho(X_r) dr), trapezoid accumulation of rho."""
    if not 0 <= s <= t:
        raise DomainError("need 0 <= s <= t")
    if s == t:
        return Estimate(1.0, 0.0, replicas)
    return decay_E_grid(spec, x, [(s, t)], replicas, seed, dt)[0]


def decay_E_grid(spec, x, st_pairs, replicas=1000, seed=0, dt=DEFAULT_DT) -> list:
    """decay_E for several (s, t) pairs from one set of paths."""
    st_pairs = [(float(a), float(b)) for a, b in st_pairs]
    if any(not 0 <= a <= b for a, b in st_pairs):
        raise DomainError("need 0 <= s <= t")
    T = max(b for _, b in st_pairs)
    steps = _n_steps(T, dt)
    path = simulate(spec, x, dt, T, seed=seed, replicas=replicas)
    out = []
    for a, b in st_pairs:
        ia, ib = int(round(a / dt)), int(round(b / dt))
        if ia > steps or ib > steps:
            raise DomainError("time outside the simulated grid")
        vals = np.exp(-2.0 * (path.rho_int[ib] - path.rho_int[ia]))
        m, se = _mean_se(vals)
        out.append(Estimate(m, se, replicas))
    return out


@dataclass
class VariationReport:
    t_grid: list
    mean_u1_sq: list
    se_u1_sq: list
    mean_u2_sq: list
    se_u2_sq: list
    max_u3_ratio: list
    max_u1_norm: float
    eps_disc: float
    bound_u1: list
    bound_u2: list
    decay_rate: float
    decay_rate_ci: tuple
    two_theta: float
    replicas: int
    seed: object
    passed: bool = True

    def as_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()
                if k != "seed"} | {"seed": str(self.seed)}


def _unit_directions(dim, seed):
    rng = np.random.default_rng(_seed_child(seed, 7))
    D = rng.standard_normal((3, dim))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def _decay_fit(times, vals):
    """Rate r of E|U1|^2 ~ exp(-r t) by OLS on log mean; jackknife over replicas."""
    sel = times > 0
    t = times[sel]

    def rate(v):
        m = v.mean(axis=1)
        return -float(np.polyfit(t, np.log(m), 1)[0])

    V = vals[sel]
    r = rate(V)
    R = V.shape[1]
    blocks = np.array_split(np.arange(R), min(R, 20))
    loo = np.array([rate(np.delete(V, b, axis=1)) for b in blocks])
    g = len(blocks)
    se = math.sqrt((g - 1) / g * np.sum((loo - loo.mean()) ** 2))
    return r, (r - 1.96 * se, r + 1.96 * se)


def variation_moment_check(spec: PotentialSpec, constants: ErgodicityConstants, t_grid,
                           replicas: int = 1000, seed=0, x=None, dt: float = DEFAULT_DT,
                           directions=None, raise_on_violation: bool = True) -> VariationReport:
    """Check E|U1|^2 <= C1^2 e^{-2 theta t}, E|U2|^2 <= C2^2 and |U3| <= P(t) at each grid time.

    Directions default to three seeded unit vectors. Stochastic bounds get a
    4-SE slack, the pathwise ones a (1 + eps_disc) factor.
    """
    if constants.inputs.get("potential") not in (None, spec.name) or constants.M1 != spec.M1:
        raise DomainError("constants were computed for a different potential")
    t_grid = sorted(float(t) for t in t_grid)
    x = np.zeros(spec.dim) if x is None else np.asarray(x, dtype=float)
    D = _unit_directions(spec.dim, seed) if directions is None else np.asarray(directions, dtype=float)
    nu, nv, nw = np.linalg.norm(D, axis=1)
    T = t_grid[-1]
    steps = _n_steps(T, dt)
    path = simulate(spec, x, dt, T, {"u": D[0], "v": D[1], "w": D[2]}, seed=seed, replicas=replicas)
    idx = [int(round(t / dt)) for t in t_grid]
    if any(i > steps for i in idx):
        raise DomainError("grid time beyond T")
    eps = path.eps_disc
    U1n = np.linalg.norm(path.U1["u"], axis=-1)
    max_u1 = float(np.max(U1n)) / nu
    rep = VariationReport(t_grid, [], [], [], [], [], max_u1, eps, [], [], float("nan"), (), 2 * constants.theta,
                          replicas, seed)
    fails = []
    if max_u1 > 1.0 + eps:
        j = np.unravel_index(np.argmax(U1n), U1n.shape)
        fails.append(("pathwise |U1| contraction", path.times[j[0]], max_u1))
    for t, i in zip(t_grid, idx):
        u1 = U1n[i] ** 2
        m1, s1 = _mean_se(u1)
        u2 = np.sum(path.U2[("u", "v")][i] ** 2, axis=-1)
        m2, s2 = _mean_se(u2)
        u3 = np.linalg.norm(path.U3[("u", "v", "w")][i], axis=-1)
        r3 = float(np.max(u3)) / (nu * nv * nw * float(constants.P(t)))
        b1 = float(constants.first_variation_bound(t)) * nu ** 2
        b2 = constants.C2 ** 2 * nu ** 2 * nv ** 2
        rep.mean_u1_sq.append(m1); rep.se_u1_sq.append(s1)
        rep.mean_u2_sq.append(m2); rep.se_u2_sq.append(s2)
        rep.max_u3_ratio.append(r3)
        rep.bound_u1.append(b1); rep.bound_u2.append(b2)
        if m1 > b1 + 4 * s1:
            fails.append(("E|U1|^2", t, m1))
        if m2 > b2 + 4 * s2:
            fails.append(("E|U2|^2", t, m2))
        if r3 > 1.0 + eps:
            fails.append(("|U3| <= P(t)", t, r3))
    vals = U1n[np.array([i for i in idx])] ** 2
    if len(t_grid) >= 2 and np.all(vals.mean(axis=1) > 0):
        rep.decay_rate, rep.decay_rate_ci = _decay_fit(np.array(t_grid), vals)
        if rep.decay_rate_ci[1] < 2 * constants.theta:
            fails.append(("decay rate of E|U1|^2 below 2 theta", t_grid[-1], rep.decay_rate))
    rep.passed = not fails
    if fails and raise_on_violation:
        name, t, val = fails[0]
        raise BoundViolated(f"{name} violated at t = {t}: {val:.6g}", {"t": t, "seed": str(seed)})
    return rep


def iu_second_moment(spec, x, t, u, replicas=1000, seed=0, dt=DEFAULT_DT):
    """E|I_u(t)|^2 next to its bound 2|u|^2/t."""
    path = simulate(spec, x, dt, t, {"u": u}, seed=seed, replicas=replicas, record_every=_n_steps(t, dt))
    m, se = _mean_se(path.I("u")[-1] ** 2)
    return Estimate(m, se, replicas), 2.0 * float(np.dot(u, u)) / t


def chapman_kolmogorov(spec, h, x, s, t, replicas=1000, seed=0, dt=DEFAULT_DT):
    """P_{s+t}h(x) directly and via resampled intermediate states at time s."""
    direct = estimate_pt(spec, h, x, s + t, replicas, _seed_child(seed, 0), dt)
    _, out = _run_batch(spec, _as_points(x, spec.dim, replicas), dt, s, [], [], [], _seed_child(seed, 1))
    mid = out[0][-1]
    pick = np.random.default_rng(_seed_child(seed, 2)).integers(0, replicas, replicas)
    _, out2 = _run_batch(spec, mid[pick], dt, t, [], [], [], _seed_child(seed, 3), check_start=False)
    m, se = _mean_se(h(out2[0][-1]))
    return direct, Estimate(m, se, replicas)


def dt_audit(spec, h, x, t, replicas=1000, seed=0, dt=DEFAULT_DT):
    """P_t h(x) at dt and at dt/2 on the same Brownian path.

    Returns (coarse, fine, paired SE of the difference); for a first-order
    scheme the error of the fine value is about |fine - coarse|.
    """
    X0 = _as_points(x, spec.dim, replicas)
    _, a = _run_batch(spec, X0, dt, t, [], [], [], seed)
    _, b = _run_batch(spec, X0, dt, t, [], [], [], seed, refine=2)
    ha, hb = h(a[0][-1]), h(b[0][-1])
    return float(ha.mean()), float(hb.mean()), _mean_se(hb - ha)[1]


# ---------------------------------------------------------------------------
# Stein solution and geometric ergodicity
# ---------------------------------------------------------------------------

@dataclass
class SteinCheck:
    residual: float
    budget: float
    mc_se: float
    fd_error: float
    dt_error: float
    tail_error: float
    Lf: float
    target: float
    mu_h: float
    mu_error: float
    f_x: float
    T_max: float
    dt: float
    eps: float
    replicas: int

    @property
    def passed(self) -> bool:
        return self.residual <= 3.0 * self.budget

    def as_dict(self):
        return dict(self.__dict__, passed=self.passed)


def tail_bound(x, m1, eta_val, T) -> float:
    """2(|x| + m1) e^{-eta T} / eta: the truncation bound for the time integral defining f."""
    return 2.0 * (float(np.linalg.norm(x)) + m1) * math.exp(-eta_val * T) / eta_val


def _stein_values(spec, h, x, eps, T, dt, replicas, seed, mu_h, refine=1):
    """Per-path f at x and at x +- eps e_i, x +- 2 eps e_i (common noise)."""
    d = spec.dim
    pts = [x]
    for scale in (1, 2):
        for i in range(d):
            e = np.zeros(d)
            e[i] = scale * eps
            pts += [x + e, x - e]
    P = len(pts)
    X0 = np.repeat(np.array(pts), replicas, axis=0)
    steps = _n_steps(T, dt)
    rng = np.random.default_rng(seed)
    fine = np.random.default_rng(_seed_child(seed, 99)) if refine == 2 else None
    _check_start(spec, X0, dt)
    # one noise draw per replica, shared by every stencil point
    Xc = X0.copy()
    acc = np.zeros(P * replicas)
    prev = h(Xc)
    sq2 = math.sqrt(2.0)
    hstep = dt / refine
    for k in range(steps):
        dB = rng.standard_normal((replicas, d)) * math.sqrt(dt)
        if refine == 2:
            split = fine.standard_normal((replicas, d)) * (0.5 * math.sqrt(dt))
            incs = (0.5 * dB + split, 0.5 * dB - split)
        else:
            incs = (dB,)
        for inc in incs:
            Xc = Xc - hstep * spec.grad(Xc) + sq2 * np.tile(inc, (P, 1))
            cur = h(Xc)
            acc += 0.5 * hstep * (prev + cur)
            prev = cur
        if k % 256 == 0:
            _guard(spec, Xc, hstep)
    _guard(spec, Xc, hstep)
    return -(acc - mu_h * T).reshape(P, replicas)


def _guard(spec, X, h):
    if not np.all(np.isfinite(X)) or float(np.max(np.sum(X * X, axis=-1))) > DEFAULT_BOX ** 2:
        raise StepSizeError("path left the box; reduce dt")
    curv = float(np.max(spec.curvature(X))) if spec.curvature is not None else spec.curvature_at(X[0])
    if h * curv > STABILITY_LIMIT:
        raise StepSizeError("step exceeds the stability limit; reduce dt")


def _generator_fd(spec, x, f_vals, eps, d, scale):
    """Per-path L f = Laplacian - <grad V, grad> by central differences with step scale*eps."""
    base = 1 + (scale - 1) * 2 * d
    f0 = f_vals[0]
    grad_v = spec.grad(x)
    out = np.zeros_like(f0)
    step = scale * eps
    for i in range(d):
        fp, fm = f_vals[base + 2 * i], f_vals[base + 2 * i + 1]
        out += (fp - 2 * f0 + fm) / step ** 2 - grad_v[i] * (fp - fm) / (2 * step)
    return out


def stein_solution_check(spec: PotentialSpec, law: RadialLaw, h: TestFunction, x, T_max: float,
                         dt: float = DEFAULT_DT, replicas: int = 1000, seed=0, eps: float = 0.05,
                         tol: float = 0.05, mu_h: Optional[float] = None,
                         richardson: bool = True) -> SteinCheck:
    """|L f(x) - (h(x) - mu(h))| with f(y) = -int_0^T [P_t h(y) - mu(h)] dt.

    The budget adds 2 MC standard errors, a Richardson estimate of the
    finite-difference error (steps eps and 2 eps), the coupled dt/2 change,
    the error of mu(h) and the truncation term: L applied to the truncated
    integral gives h - P_T h exactly, and |P_T h(x) - mu(h)| is at most
    2(|x| + m1) e^{-eta T} Lip(h).
    """
    from .constants import eta as eta_fn

    if not h.smooth or h.grad_h is None:
        raise DomainError("the Stein check needs a smooth h with a gradient")
    x = np.asarray(x, dtype=float)
    et = eta_fn(spec)
    m1 = law.radial_moment(1.0)
    tb = tail_bound(x, m1, et, T_max)
    if tb >= tol:
        need = math.log(2.0 * (np.linalg.norm(x) + m1) / (et * tol)) / et
        raise TailBudgetError(f"T_max = {T_max} leaves tail bound {tb:.3g} >= tol {tol}; "
                              f"need T_max > {need:.3g}")
    mu_err = 0.0
    if mu_h is None:
        est = mu_expectation(law, h, seed=0)
        mu_h, mu_err = est.value, est.error
    d = spec.dim
    fv = _stein_values(spec, h, x, eps, T_max, dt, replicas, seed, mu_h)
    L1 = _generator_fd(spec, x, fv, eps, d, 1)
    L2 = _generator_fd(spec, x, fv, eps, d, 2)
    Lf, se = _mean_se(L1)
    fd_err = abs(float(L2.mean()) - Lf) / 3.0
    dt_err = 0.0
    if richardson:
        fv2 = _stein_values(spec, h, x, eps, T_max, dt, replicas, seed, mu_h, refine=2)
        dt_err = abs(float(_generator_fd(spec, x, fv2, eps, d, 1).mean()) - Lf)
    target = float(h(x)) - mu_h
    lip = h.lipschitz_bound if math.isfinite(h.lipschitz_bound) else h.lipschitz_audit(d)
    tail = 2.0 * (float(np.linalg.norm(x)) + m1) * math.exp(-et * T_max) * lip
    budget = 2.0 * se + fd_err + dt_err + tail + mu_err
    return SteinCheck(residual=abs(Lf - target), budget=budget, mc_se=se, fd_error=fd_err,
                      dt_error=dt_err, tail_error=tail, Lf=Lf, target=target, mu_h=mu_h, mu_error=mu_err,
                      f_x=float(fv[0].mean()), T_max=T_max, dt=dt, eps=eps, replicas=replicas)


@dataclass
class GeomErgReport:
    t_grid: list
    w1: list
    bounds: list
    bias_floor: float
    bias_floor_sd: float
    allowance: float
    m1_mu: float
    eta: float
    samples: int
    passed: bool

    def as_dict(self):
        return dict(self.__dict__)


def two_sample_floor(law, samples, repeats=4, seed=0):
    """W1 between independent mu samples of size ``samples``: the estimator's bias floor."""
    vals = []
    for r in range(repeats):
        a = sample_law(law, samples, _seed_child(seed, 10, r))
        b = sample_law(law, samples, _seed_child(seed, 11, r))
        vals.append(w1_exact(a, b).cost)
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if repeats > 1 else 0.0


def geom_erg_check(spec: PotentialSpec, law: RadialLaw, x, t_grid, samples: int = 1000, seed=0,
                   dt: float = DEFAULT_DT, floor_repeats: int = 4) -> GeomErgReport:
    """W1(law of X_t^x, mu) against 2(|x| + m1) e^{-eta t} plus the two-sample floor.

    The allowance is the floor's mean plus four of its standard deviations,
    since each grid point is a single two-sample draw.
    """
    from .constants import eta as eta_fn

    x = np.asarray(x, dtype=float)
    t_grid = sorted(float(t) for t in t_grid)
    et = eta_fn(spec)
    m1 = law.radial_moment(1.0)
    floor, floor_sd = two_sample_floor(law, samples, floor_repeats, seed)
    allowance = floor + 4.0 * floor_sd
    states = _states_at(spec, x, dt, t_grid, samples, _seed_child(seed, 0))
    w1s, bounds = [], []
    for j, t in enumerate(t_grid):
        target = sample_law(law, samples, _seed_child(seed, 20, j))
        w1s.append(w1_exact(states[j], target).cost)
        bounds.append(2.0 * (float(np.linalg.norm(x)) + m1) * math.exp(-et * t))
    passed = all(w <= b + allowance for w, b in zip(w1s, bounds))
    return GeomErgReport(t_grid, w1s, bounds, floor, floor_sd, allowance, m1, et, samples, passed)


def _states_at(spec, x, dt, t_grid, samples, seed):
    """X_t^x for ``samples`` paths at each grid time, from one simulation."""
    T = max(t_grid)
    X0 = _as_points(x, spec.dim, samples)
    if T == 0:
        return [X0.copy() for _ in t_grid]
    steps = _n_steps(T, dt)
    rec = np.array(sorted({_n_steps(t, dt) if t > 0 else 0 for t in t_grid} | {0, steps}))
    _check_start(spec, X0, dt)
    out = _integrate(spec, X0, dt, steps, np.zeros((0, samples, spec.dim)), [], [],
                     np.random.default_rng(seed), rec, SYM_WEIGHT, DEFAULT_BOX, True)
    where = {int(k): i for i, k in enumerate(rec)}
    return [out[0][where[_n_steps(t, dt) if t > 0 else 0]] for t in t_grid]
