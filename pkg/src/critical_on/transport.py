"""Empirical Wasserstein-1 distances between equal-size point clouds."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numba as nb
import numpy as np

from .errors import DomainError, InstanceTooLargeError, SizeMismatchError

MAX_EXACT_SIZE = 5000
CERT_REL_TOL = 1e-9
# a zero-cost instance cannot meet a purely relative tolerance in floating point
CERT_ABS_FLOOR = 1e-12


@dataclass(frozen=True)
class EmpiricalCloud:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 1:
            raise DomainError("cloud needs at least one point")
        if not np.all(np.isfinite(p)):
            raise DomainError("cloud points must be finite")
        object.__setattr__(self, "points", np.ascontiguousarray(p))

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class TransportResult:
    cost: float
    method: str
    matching: Optional[np.ndarray] = None
    certificate_residual: Optional[float] = None


def _cloud(x) -> EmpiricalCloud:
    return x if isinstance(x, EmpiricalCloud) else EmpiricalCloud(x)


@nb.njit(cache=True)
def _distance_matrix(a, b):
    m, d = a.shape
    C = np.empty((m, b.shape[0]))
    for i in range(m):
        for j in range(b.shape[0]):
            s = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                s += t * t
            C[i, j] = math.sqrt(s)
    return C


@nb.njit(cache=True)
def _hungarian(C):
    """Shortest augmenting path assignment with row/column potentials.

    Returns (col_of_row, u, v) with u_i + v_j <= C_ij and equality on the
    matched pairs at termination.
    """
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = INF
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col, u[1:].copy(), v[1:].copy()


@nb.njit(cache=True)
def _certificate(C, col, u, v):
    """Complementary-slackness residual: duality gap plus scaled dual infeasibility."""
    n = C.shape[0]
    primal = 0.0
    slack_eq = 0.0
    for i in range(n):
        primal += C[i, col[i]]
        slack_eq = max(slack_eq, abs(C[i, col[i]] - u[i] - v[col[i]]))
    dual = u.sum() + v.sum()
    viol = 0.0
    for i in range(n):
        for j in range(n):
            viol = max(viol, u[i] + v[j] - C[i, j])
    return abs(primal - dual) + n * max(viol, 0.0) + n * slack_eq, primal


def matching_cost_matrix(a, b) -> np.ndarray:
    a, b = _cloud(a), _cloud(b)
    return _distance_matrix(a.points, b.points)


def _equalize(a, b, on_mismatch, seed):
    if a.dim != b.dim:
        raise SizeMismatchError(f"dimension mismatch {a.dim} vs {b.dim}")
    if a.m == b.m:
        return a, b
    if on_mismatch != "resample":
        raise SizeMismatchError(f"cloud sizes differ: {a.m} vs {b.m}")
    m = min(a.m, b.m)
    warnings.warn(f"resampling clouds down to m={m} points", RuntimeWarning, stacklevel=3)
    rng = np.random.default_rng(seed)
    if a.m > m:
        a = EmpiricalCloud(a.points[np.sort(rng.choice(a.m, m, replace=False))])
    if b.m > m:
        b = EmpiricalCloud(b.points[np.sort(rng.choice(b.m, m, replace=False))])
    return a, b


def w1_exact(a, b, on_mismatch: str = "error", seed=0, max_size: int = MAX_EXACT_SIZE) -> TransportResult:
    """(1/m) min over permutations of sum |a_i - b_pi(i)|, with an optimality certificate."""
    a, b = _equalize(_cloud(a), _cloud(b), on_mismatch, seed)
    if a.m > max_size:
        raise InstanceTooLargeError(f"m = {a.m} exceeds the exact-matching cap {max_size}")
    C = _distance_matrix(a.points, b.points)
    col, u, v = _hungarian(C)
    resid, primal = _certificate(C, col, u, v)
    if resid > max(CERT_REL_TOL * primal, CERT_ABS_FLOOR * a.m):
        raise ArithmeticError(f"assignment certificate failed: residual {resid:g}, cost {primal:g}")
    return TransportResult(cost=primal / a.m, method="exact_matching", matching=col,
                           certificate_residual=float(resid))


def w1_sorted_1d(a, b) -> TransportResult:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise SizeMismatchError(f"sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise DomainError("empty input")
    return TransportResult(cost=float(np.mean(np.abs(np.sort(a) - np.sort(b)))), method="sorted_1d")


def w1_sliced(a, b, directions: int = 64, seed=0) -> TransportResult:
    """Average of 1D sorted W1 over uniformly random projection directions."""
    a, b = _cloud(a), _cloud(b)
    if a.m != b.m or a.dim != b.dim:
        raise SizeMismatchError("sliced W1 needs equal sizes and dimensions")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((directions, a.dim))
    U /= np.linalg.norm(U, axis=1, keepdims=True)
    pa = np.sort(a.points @ U.T, axis=0)
    pb = np.sort(b.points @ U.T, axis=0)
    per = np.mean(np.abs(pa - pb), axis=0)
    return TransportResult(cost=float(per.mean()), method="sliced")


def w1(a, b, method: str = "exact", **kw) -> TransportResult:
    if method == "exact":
        return w1_exact(a, b, **kw)
    if method == "sorted1d":
        return w1_sorted_1d(a, b)
    if method == "sliced":
        return w1_sliced(a, b, **kw)
    raise DomainError(f"unknown transport method {method!r}")
