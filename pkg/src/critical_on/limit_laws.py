"""Limiting laws: the quartic density exp(-a|x|^4) and the standard Gaussian.

Both are radial, so normalizers, moments and tail masses reduce to
one-dimensional integrals in r with weight ``r^(N-1) exp(-phi(r))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special, stats

from .errors import DomainError, IntegrationError
from .specfun import ModelFunctions

QUAD_EPSREL = 1e-13
TAIL_TARGET = 1e-16
QMC_LOG2_POINTS = 14
QMC_SCRAMBLES = 8


def sphere_area(N: int) -> float:
    return 2.0 * math.pi ** (N / 2.0) / math.gamma(N / 2.0)


def _uniform_directions(rng, count, N):
    g = rng.standard_normal((count, N))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class TestFunction:
    """Test function with its gradient and a certified Lipschitz constant.

    ``radial`` optionally gives the profile phi with h(x) = phi(|x|), which
    lets expectations under radial laws use one-dimensional quadrature.
    """

    h: Callable
    grad_h: Optional[Callable] = None
    lipschitz_bound: float = math.inf
    smooth: bool = False
    radial: Optional[Callable] = None
    name: str = "h"
    # optional directional derivatives D^2 h(x)[u, v] and D^3 h(x)[u, v, w]
    hess_h: Optional[Callable] = None
    d3_h: Optional[Callable] = None

    __test__ = False  # keep pytest from collecting this class

    def __call__(self, x):
        return self.h(x)

    def lipschitz_audit(self, dim, pairs=2000, scale=3.0, seed=0) -> float:
        """Largest observed |h(x)-h(y)|/|x-y| over random pairs."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((pairs, dim)) * scale
        y = x + rng.standard_normal((pairs, dim)) * rng.uniform(1e-3, scale, (pairs, 1))
        num = np.abs(self.h(x) - self.h(y))
        return float(np.max(num / np.linalg.norm(x - y, axis=1)))


@dataclass(frozen=True)
class MuEstimate:
    value: float
    error: float
    method: str


class RadialLaw:
    """Law on R^N with density proportional to exp(-phi(|x|))."""

    N: int

    def phi(self, r):
        raise NotImplementedError

    # closed forms supplied by subclasses
    def radial_moment(self, k: float) -> float:
        raise NotImplementedError

    def radial_cdf(self, R: float) -> float:
        raise NotImplementedError

    def log_normalizer_closed(self) -> float:
        raise NotImplementedError

    def r_max(self) -> float:
        raise NotImplementedError

    def _weight(self, r, k=0.0):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = np.where(r > 0, np.log(np.maximum(r, 1e-300)), -np.inf)
        return np.exp((self.N - 1 + k) * lr - self.phi(r))

    def radial_integral(self, g=None, lo=0.0, hi=None, k=0.0) -> float:
        """Adaptive Gauss-Kronrod of g(r) r^(N-1+k) exp(-phi(r)) on [lo, hi]."""
        hi = self.r_max() if hi is None else min(hi, self.r_max())
        if hi <= lo:
            return 0.0
        if g is None:
            f = lambda r: float(self._weight(r, k))
        else:
            f = lambda r: float(g(r) * self._weight(r, k))
        # split at the radial mode region to help QUADPACK
        pts = [p for p in self._breakpoints() if lo < p < hi]
        val, _ = integrate.quad(f, lo, hi, points=pts or None, epsabs=0.0,
                                epsrel=QUAD_EPSREL, limit=400)
        return val

    def _breakpoints(self):
        return []

    # second route: substitute s so the weight becomes s^alpha e^-s ds and
    # let QUADPACK's algebraic-weight routine handle the endpoint behaviour
    def _s_map(self):
        """Return (alpha, r_of_s, log_const) with r^(N-1)e^-phi dr = const s^alpha e^-s ds."""
        raise NotImplementedError

    def _s_integral(self, g=None) -> float:
        alpha, r_of_s, _ = self._s_map()
        s_max = float(self.phi(self.r_max()))
        if g is None:
            f = lambda s: math.exp(-s)
        else:
            f = lambda s: float(g(r_of_s(s))) * math.exp(-s)
        val, _ = integrate.quad(f, 0.0, s_max, weight="alg", wvar=(alpha, 0.0),
                                epsabs=0.0, epsrel=QUAD_EPSREL, limit=400)
        return val

    def log_normalizer_gamma_route(self) -> float:
        _, _, lc = self._s_map()
        return math.log(sphere_area(self.N)) + lc + math.log(self._s_integral())

    def radial_expectation_gamma_route(self, profile) -> float:
        return self._s_integral(profile) / self._s_integral()

    def log_normalizer_quad(self) -> float:
        return math.log(sphere_area(self.N) * self.radial_integral())

    def radial_moment_quad(self, k: float) -> float:
        return self.radial_integral(k=k) / self.radial_integral()

    def mass_within_quad(self, R: float) -> float:
        Z = self.radial_integral()
        return self.radial_integral(hi=R) / Z

    def tail_mass_quad(self, R: float) -> float:
        Z = self.radial_integral()
        return self.radial_integral(lo=R) / Z


class QuarticLaw(RadialLaw):
    """mu(dx) proportional to exp(-a|x|^4) on R^N, a = N^2/(4N+8) unless given."""

    def __init__(self, N: int, a: Optional[float] = None):
        ModelFunctions(N)  # validates N
        self.N = int(N)
        self.a = ModelFunctions(N).a_N if a is None else float(a)
        if not self.a > 0:
            raise DomainError("quartic coefficient must be positive")
        self.log_normalizer = self.log_normalizer_quad()
        alt = self.log_normalizer_gamma_route()
        if abs(math.expm1(self.log_normalizer - alt)) > 1e-8:
            raise IntegrationError(
                f"normalizer routes disagree: {self.log_normalizer} vs {alt}")

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        return self.a * r ** 4

    def _breakpoints(self):
        mode = ((self.N - 1) / (4 * self.a)) ** 0.25
        return [mode] if mode > 0 else []

    def r_max(self) -> float:
        # Gamma(s, x) <= x^(s-1) e^(-x) / (1 - (s-1)/x) for x > s-1, s = N/4
        s = self.N / 4.0
        x = max(2.0 * s + 2.0, 10.0)
        lz = math.log(math.gamma(s)) - math.log(4.0) - s * math.log(self.a)
        while True:
            corr = 1.0 / (1.0 - (s - 1.0) / x) if s > 1 else 1.0
            lb = (s - 1.0) * math.log(x) - x + math.log(corr) - math.log(4.0) - s * math.log(self.a)
            if lb - lz < math.log(TAIL_TARGET):
                return (x / self.a) ** 0.25
            x += 1.0

    def log_normalizer_closed(self) -> float:
        return (math.log(sphere_area(self.N)) + special.gammaln(self.N / 4.0)
                - math.log(4.0) - (self.N / 4.0) * math.log(self.a))

    def radial_moment(self, k: float) -> float:
        if k < 0:
            raise DomainError("radial moment order must be >= 0")
        N = self.N
        return math.exp(-(k / 4.0) * math.log(self.a)
                        + special.gammaln((N + k) / 4.0) - special.gammaln(N / 4.0))

    def radial_cdf(self, R: float) -> float:
        return float(special.gammainc(self.N / 4.0, self.a * R ** 4))

    def _s_map(self):
        a, N = self.a, self.N
        return N / 4.0 - 1.0, lambda s: (s / a) ** 0.25, -math.log(4.0) - (N / 4.0) * math.log(a)

    def sample_radius(self, rng, count):
        g = rng.standard_gamma(self.N / 4.0, count) / self.a
        return g ** 0.25

    def radius_from_uniform(self, u):
        return (special.gammaincinv(self.N / 4.0, u) / self.a) ** 0.25


class GaussLaw(RadialLaw):
    """Standard Gaussian N(0, I_N) viewed as a radial law."""

    def __init__(self, N: int):
        if int(N) != N or N < 1:
            raise DomainError("N must be a positive integer")
        self.N = int(N)
        self.log_normalizer = self.log_normalizer_quad()

    def phi(self, r):
        r = np.asarray(r, dtype=float)
        return 0.5 * r * r

    def _breakpoints(self):
        return [math.sqrt(self.N - 1.0)] if self.N > 1 else []

    def r_max(self) -> float:
        return math.sqrt(2 * self.N + 80.0) + 4.0

    def log_normalizer_closed(self) -> float:
        return 0.5 * self.N * math.log(2 * math.pi)

    def radial_moment(self, k: float) -> float:
        N = self.N
        return math.exp((k / 2.0) * math.log(2.0) + special.gammaln((N + k) / 2.0)
                        - special.gammaln(N / 2.0))

    def radial_cdf(self, R: float) -> float:
        return float(special.gammainc(self.N / 2.0, 0.5 * R * R))

    def _s_map(self):
        N = self.N
        return N / 2.0 - 1.0, lambda s: math.sqrt(2.0 * s), (N / 2.0 - 1.0) * math.log(2.0)

    def sample_radius(self, rng, count):
        return np.sqrt(2.0 * rng.standard_gamma(self.N / 2.0, count))

    def radius_from_uniform(self, u):
        return np.sqrt(2.0 * special.gammaincinv(self.N / 2.0, u))


def sample_law(law: RadialLaw, count: int, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    r = law.sample_radius(rng, count)
    return r[:, None] * _uniform_directions(rng, count, law.N)


def sample_quartic(law: QuarticLaw, count: int, seed=0) -> np.ndarray:
    """iid draws from the quartic law: |Y|^4 ~ Gamma(N/4, rate a), uniform direction."""
    if count < 1:
        raise DomainError("count must be >= 1")
    return sample_law(law, count, seed)


def sample_gauss(N: int, count: int, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((count, N))


def radial_moment(law: RadialLaw, k: float) -> float:
    return law.radial_moment(k)


def _radial_mu(law: RadialLaw, h: TestFunction, tol):
    gk = law.radial_integral(g=lambda r: h.radial(r)) / law.radial_integral()
    gl = law.radial_expectation_gamma_route(h.radial)
    diff = abs(gk - gl)
    allowed = tol * max(1.0, abs(gk))
    if diff > allowed:
        raise IntegrationError(
            f"radial quadrature routes disagree by {diff:g} (allowed {allowed:g})")
    return MuEstimate(gk, max(diff, 1e-15 * max(1.0, abs(gk))), "radial-quadrature")


def _qmc_mu(law: RadialLaw, h: TestFunction, seed, log2_points, scrambles, tol):
    N = law.N
    ests = []
    for s in range(scrambles):
        eng = stats.qmc.Sobol(d=N + 1, scramble=True, seed=np.random.default_rng([seed, s]))
        u = eng.random_base2(log2_points)
        u = np.clip(u, 1e-15, 1 - 1e-15)
        r = law.radius_from_uniform(u[:, 0])
        d = special.ndtri(u[:, 1:])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        ests.append(float(np.mean(h.h(r[:, None] * d))))
    ests = np.array(ests)
    half = scrambles // 2
    a, b = ests[:half].mean(), ests[half:].mean()
    se = ests.std(ddof=1) / math.sqrt(scrambles)
    se_diff = ests.std(ddof=1) * math.sqrt(1.0 / half + 1.0 / (scrambles - half))
    if abs(a - b) > 6.0 * se_diff + tol:
        raise IntegrationError(f"QMC halves disagree: {a:g} vs {b:g}")
    return MuEstimate(float(ests.mean()), float(max(se, 1e-16)), "sobol-qmc")


def mu_expectation(law: RadialLaw, h: TestFunction, seed=0, tol=1e-9,
                   log2_points=QMC_LOG2_POINTS, scrambles=QMC_SCRAMBLES) -> MuEstimate:
    """mu(h) with an error estimate.

    Radial h: Gauss-Kronrod in r, cross-checked by an algebraic-weight rule in
    the variable s = phi(r).
    Otherwise: randomized Sobol points pushed through the law's radial inverse
    CDF and a Gaussian direction map (8 x 2^14 = 131072 points by default).
    """
    if h.radial is not None:
        return _radial_mu(law, h, tol)
    return _qmc_mu(law, h, seed, log2_points, scrambles, tol)


# ---------------------------------------------------------------------------
# Standard test functions
# ---------------------------------------------------------------------------

def _zero_form(x, *dirs):
    return np.zeros(np.broadcast_shapes(*(np.shape(a) for a in (x,) + dirs))[:-1])


def constant_function(c: float) -> TestFunction:
    return TestFunction(
        h=lambda x: np.full(np.shape(x)[:-1], float(c)),
        grad_h=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        lipschitz_bound=0.0, smooth=True, radial=lambda r: np.full(np.shape(r), float(c)),
        name=f"const({c})", hess_h=_zero_form, d3_h=_zero_form)


def linear_function(a) -> TestFunction:
    a = np.asarray(a, dtype=float)
    return TestFunction(
        h=lambda x: np.asarray(x, dtype=float) @ a,
        grad_h=lambda x: np.broadcast_to(a, np.shape(x)).copy(),
        lipschitz_bound=float(np.linalg.norm(a)), smooth=True, name="linear",
        hess_h=_zero_form, d3_h=_zero_form)


def norm_squared() -> TestFunction:
    return TestFunction(
        h=lambda x: np.sum(np.asarray(x, dtype=float) ** 2, axis=-1),
        grad_h=lambda x: 2.0 * np.asarray(x, dtype=float),
        smooth=True, radial=lambda r: np.asarray(r, dtype=float) ** 2, name="|x|^2",
        hess_h=lambda x, u, v: 2.0 * np.sum(np.asarray(u) * v, axis=-1), d3_h=_zero_form)


def radial_bump(scale: float = 1.0, height: float = 1.0) -> TestFunction:
    """h(x) = height * exp(-|x|^2 / (2 scale^2)); Lipschitz constant height/(scale sqrt(e))."""
    s2 = scale * scale

    def h(x):
        x = np.asarray(x, dtype=float)
        return height * np.exp(-0.5 * np.sum(x * x, axis=-1) / s2)

    def grad(x):
        x = np.asarray(x, dtype=float)
        return -(x / s2) * h(x)[..., None]

    def dot(a, b):
        return np.sum(np.asarray(a, dtype=float) * b, axis=-1)

    def hess(x, u, v):
        xu, xv = dot(x, u), dot(x, v)
        return h(x) * (xu * xv / s2 ** 2 - dot(u, v) / s2)

    def d3(x, u, v, w):
        xu, xv, xw = dot(x, u), dot(x, v), dot(x, w)
        inner = xu * xv / s2 ** 2 - dot(u, v) / s2
        return h(x) * (-xw / s2 * inner + (dot(w, u) * xv + xu * dot(w, v)) / s2 ** 2)

    return TestFunction(
        h=h, grad_h=grad, lipschitz_bound=height / (scale * math.sqrt(math.e)), smooth=True,
        radial=lambda r: height * np.exp(-0.5 * np.asarray(r, dtype=float) ** 2 / s2),
        name=f"bump(scale={scale})", hess_h=hess, d3_h=d3)


def smoothed_coordinate(index: int = 0, scale: float = 1.0) -> TestFunction:
    """h(x) = scale * tanh(x_i / scale): bounded, smooth, 1-Lipschitz."""

    def h(x):
        return scale * np.tanh(np.asarray(x, dtype=float)[..., index] / scale)

    def grad(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., index] = 1.0 / np.cosh(x[..., index] / scale) ** 2
        return g

    def hess(x, u, v):
        y = np.asarray(x, dtype=float)[..., index] / scale
        sech2 = 1.0 / np.cosh(y) ** 2
        return -2.0 * sech2 * np.tanh(y) / scale * np.asarray(u)[..., index] * np.asarray(v)[..., index]

    def d3(x, u, v, w):
        y = np.asarray(x, dtype=float)[..., index] / scale
        sech2, th = 1.0 / np.cosh(y) ** 2, np.tanh(y)
        c = -2.0 * (sech2 * sech2 - 2.0 * sech2 * th * th) / scale ** 2
        return c * np.asarray(u)[..., index] * np.asarray(v)[..., index] * np.asarray(w)[..., index]

    return TestFunction(h=h, grad_h=grad, lipschitz_bound=1.0, smooth=True,
                        name=f"tanh-coordinate({index})", hess_h=hess, d3_h=d3)
