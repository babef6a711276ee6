"""Bessel-type series U_nu and the conditional-moment functions f_N, g_N.

``U_nu(x) = sum_k x^(2k) / (4^k k! (nu+1)^(k))`` with ``(a)^(k)`` the rising
factorial. It relates to the modified Bessel function through
``U_nu(x) = Gamma(nu+1) (2/x)^nu I_nu(x)``; the quadrature oracle below uses
the Poisson integral form of that identity and never touches the series.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import integrate, special

from .errors import DomainError, SeriesOverflowError

SERIES_SAFETY = 50.0
REL_TOL = 1e-16
MAX_TERMS = 500
# |m| can exceed 1 by a few ulps after summing unit spins.
_UNIT_SLACK = 1e-12


@dataclass(frozen=True)
class SeriesEval:
    value: float
    terms_used: int
    truncation_bound: float


@dataclass(frozen=True)
class ModelFunctions:
    """Container for the spin dimension N and the quartic coefficient a_N."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise DomainError(f"N must be an integer >= 2, got {self.N!r}")

    @property
    def a_exact(self) -> Fraction:
        return Fraction(self.N * self.N, 4 * self.N + 8)

    @property
    def a_N(self) -> float:
        return float(self.a_exact)


def _check_nu(nu):
    if not nu > -1:
        raise DomainError(f"U_nu requires nu > -1, got {nu}")


def u_nu(nu: float, x: float) -> SeriesEval:
    """Sum the U_nu series at a scalar argument.

    Terms follow ``t_{k+1} = t_k x^2 / (4 (k+1)(nu+1+k))``; summation stops once
    the next term drops below ``REL_TOL`` times the partial sum.
    """
    _check_nu(nu)
    x = float(x)
    if not math.isfinite(x):
        raise DomainError("U_nu argument must be finite")
    if abs(x) > SERIES_SAFETY:
        raise SeriesOverflowError(
            f"|x| = {abs(x):g} exceeds series safety threshold {SERIES_SAFETY:g}; "
            "use u_nu_bessel"
        )
    x2 = x * x
    term = 1.0
    total = 1.0
    k = 0
    while k < MAX_TERMS:
        ratio = x2 / (4.0 * (k + 1) * (nu + 1.0 + k))
        term *= ratio
        k += 1
        total += term
        if term < REL_TOL * total:
            break
    # tail beyond the last included term is geometric once the ratio is < 1
    ratio_next = x2 / (4.0 * (k + 1) * (nu + 1.0 + k))
    nxt = term * ratio_next
    bound = nxt / (1.0 - ratio_next) if ratio_next < 1.0 else math.inf
    return SeriesEval(value=total, terms_used=k + 1, truncation_bound=bound)


def u_nu_array(nu: float, x) -> np.ndarray:
    """Vectorised U_nu for arrays of arguments (same stopping rule)."""
    _check_nu(nu)
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)):
        raise DomainError("U_nu argument must be finite")
    if x.size and np.max(np.abs(x)) > SERIES_SAFETY:
        raise SeriesOverflowError(
            f"argument exceeds series safety threshold {SERIES_SAFETY:g}"
        )
    x2 = x * x
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(MAX_TERMS):
        term = term * (x2 / (4.0 * (k + 1) * (nu + 1.0 + k)))
        total += term
        if not np.any(term >= REL_TOL * total):
            break
    return total


def u_nu_bessel(nu: float, x: float) -> float:
    """Quadrature oracle for U_nu, valid for nu > -1/2.

    ``U_nu(x) = Gamma(nu+1) / (sqrt(pi) Gamma(nu+1/2)) * int_{-1}^{1} (1-t^2)^(nu-1/2) cosh(xt) dt``
    The algebraic endpoint weight is handled by QUADPACK's QAWS routine.
    """
    if not nu > -0.5:
        raise DomainError("Bessel integral representation needs nu > -1/2")
    alpha = nu - 0.5
    x = abs(float(x))
    # cosh(xt) = e^{x} * (e^{x(t-1)} + e^{-x(t+1)}) / 2 keeps the integrand O(1)
    val, _ = integrate.quad(
        lambda t: 0.5 * (math.exp(x * (t - 1.0)) + math.exp(-x * (t + 1.0))),
        -1.0,
        1.0,
        weight="alg",
        wvar=(alpha, alpha),
        epsabs=0.0,
        epsrel=1e-13,
        limit=200,
    )
    log_pref = special.gammaln(nu + 1.0) - 0.5 * math.log(math.pi) - special.gammaln(nu + 0.5)
    return math.exp(log_pref + x) * val


def _as_model(model) -> ModelFunctions:
    return model if isinstance(model, ModelFunctions) else ModelFunctions(int(model))


def _check_unit(x, extended):
    x = np.asarray(x, dtype=float)
    if extended:
        return x
    if np.any(x < -_UNIT_SLACK) or np.any(x > 1.0 + _UNIT_SLACK):
        raise DomainError("f_N/g_N are evaluated on [0, 1]; pass extended=True otherwise")
    return np.clip(x, 0.0, 1.0)


def f_and_g(model, x, extended: bool = False):
    """Return ``(f_N(x), g_N(x))`` from one shared evaluation of three U values."""
    model = _as_model(model)
    N = model.N
    xs = _check_unit(x, extended)
    y = N * xs
    nu = 0.5 * N
    u_lo = u_nu_array(nu - 1.0, y)
    u_mid = u_nu_array(nu, y)
    u_hi = u_nu_array(nu + 1.0, y)
    f = u_mid / u_lo
    g = (N / (N + 2.0)) * u_hi / u_lo
    if np.ndim(x) == 0:
        return float(f), float(g)
    return f, g


def f_fun(model, x, extended: bool = False):
    return f_and_g(model, x, extended)[0]


def g_fun(model, x, extended: bool = False):
    return f_and_g(model, x, extended)[1]


def identity_residual(model, x):
    """``f_N(x) + x^2 g_N(x) - 1``; zero up to rounding."""
    f, g = f_and_g(model, x)
    x = np.asarray(x, dtype=float)
    return f + x * x * g - 1.0


def f_taylor_poly(model, x):
    model = _as_model(model)
    N = model.N
    x = np.asarray(x, dtype=float)
    x2 = x * x
    return 1.0 - N * x2 / (N + 2.0) + 2.0 * N * N * x2 * x2 / ((N + 2.0) * (N + 4.0))


def f_taylor_check(model, x):
    """Remainder of f_N after its quartic Taylor polynomial; O(x^6)."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 0.25):
        raise DomainError("Taylor remainder check is restricted to |x| <= 0.25")
    f = f_fun(model, np.abs(x), extended=True)
    out = f - f_taylor_poly(model, x)
    return float(out) if np.ndim(out) == 0 else out


def taylor_order_fit(model, xs=None):
    """Least-squares slope and prefactor of log|remainder| against log x.

    Returns ``(slope, K)`` where ``K = max |remainder| / x^6`` over the grid.
    """
    if xs is None:
        xs = np.linspace(0.02, 0.2, 10)
    xs = np.asarray(xs, dtype=float)
    rem = np.abs(f_taylor_check(model, xs))
    slope = np.polyfit(np.log(xs), np.log(rem), 1)[0]
    K = float(np.max(rem / xs**6))
    return float(slope), K


def bessel_ratio_f(model, x):
    """f_N through scipy's exponentially-scaled I_nu (cross-check path)."""
    model = _as_model(model)
    N = model.N
    if x == 0:
        return 1.0
    y = N * x
    nu = 0.5 * N
    return float(special.ive(nu, y) / special.ive(nu - 1.0, y) / x)


def specfun_table(N: int, grid: int):
    """Rows ``(x, f, g, identity_residual, taylor_residual)`` on a uniform grid of [0, 1].

    The Taylor residual is reported only where |x| <= 0.25 and is NaN elsewhere.
    """
    model = ModelFunctions(N)
    xs = np.linspace(0.0, 1.0, grid)
    f, g = f_and_g(model, xs)
    ident = f + xs * xs * g - 1.0
    taylor = np.full_like(xs, np.nan)
    small = xs <= 0.25
    taylor[small] = f[small] - f_taylor_poly(model, xs[small])
    return [
        (float(a), float(b), float(c), float(d), float(e))
        for a, b, c, d, e in zip(xs, f, g, ident, taylor)
    ]
