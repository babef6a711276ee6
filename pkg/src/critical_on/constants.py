"""Confining potentials, numerical audits of their curvature conditions, and
the explicit constant chain behind the semigroup derivative bounds.

Derivative actions are vectorised: every argument may carry leading batch
dimensions, with the spatial axis last.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import AssumptionViolated, DegenerateConstantsError, DomainError
from .limit_laws import GaussLaw, QuarticLaw, RadialLaw
from .specfun import ModelFunctions

MARGIN_TOL = 1e-8


def _dot(a, b):
    return np.sum(a * b, axis=-1, keepdims=True)


def _norm(a):
    return np.linalg.norm(a, axis=-1)


@dataclass(frozen=True)
class PotentialSpec:
    dim: int
    V: Callable
    grad: Callable
    hess_action: Callable
    d3_action: Callable
    d4_action: Callable
    rho: Callable
    c1: float
    c2: float
    k: float
    B: float
    M1: float
    M2: float
    M0: Optional[float] = None
    name: str = "V"
    law_factory: Optional[Callable[[], RadialLaw]] = None
    # sup of the Hessian spectral radius at x; used to size Euler steps
    curvature: Optional[Callable] = None

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise DomainError("c1 and c2 must be positive")
        if self.k < 0 or self.B < 0:
            raise DomainError("k and B must be nonnegative")
        if not (self.M1 > 0 and self.M2 > 0):
            raise DomainError("M1 and M2 must be positive")
        if self.k == 0 and not (self.M0 is not None and self.M0 > 0):
            raise DomainError("M0 > 0 is required when k = 0")

    def law(self) -> RadialLaw:
        if self.law_factory is None:
            raise DomainError("non-radial potentials are not supported for mu-quantities")
        return self.law_factory()

    def with_(self, **changes) -> "PotentialSpec":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return PotentialSpec(**d)

    def hessian_matrix(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        E = np.eye(self.dim)
        return np.stack([self.hess_action(x, E[j]) for j in range(self.dim)], axis=-1)

    def curvature_at(self, x) -> float:
        if self.curvature is not None:
            return float(np.max(self.curvature(np.asarray(x, dtype=float))))
        return float(np.max(np.abs(np.linalg.eigvalsh(self.hessian_matrix(x)))))


def quartic_potential(N: int, B: float = 1.0, a: Optional[float] = None,
                      M1: Optional[float] = None, M2: Optional[float] = None) -> PotentialSpec:
    """V(x) = a|x|^4 with rho = 4a|x|^2, k = 2, c1 = c2 = 4a and M1 = M2 = 48a."""
    a = ModelFunctions(N).a_N if a is None else float(a)

    def V(x):
        r2 = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
        return a * r2 * r2

    def grad(x):
        x = np.asarray(x, dtype=float)
        return 4.0 * a * _dot(x, x) * x

    def hess(x, u):
        x = np.asarray(x, dtype=float)
        return 4.0 * a * (_dot(x, x) * u + 2.0 * _dot(x, u) * x)

    def d3(x, u, v):
        x = np.asarray(x, dtype=float)
        return 8.0 * a * (_dot(x, v) * u + _dot(u, v) * x + _dot(x, u) * v)

    def d4(x, u, v, w):
        return 8.0 * a * (_dot(w, v) * u + _dot(u, v) * w + _dot(w, u) * v)

    def rho(x):
        return 4.0 * a * np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)

    def curvature(x):
        return 12.0 * a * np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)

    return PotentialSpec(
        dim=N, V=V, grad=grad, hess_action=hess, d3_action=d3, d4_action=d4, rho=rho,
        c1=4 * a, c2=4 * a, k=2.0, B=float(B),
        M1=48 * a if M1 is None else float(M1), M2=48 * a if M2 is None else float(M2),
        name=f"quartic(N={N})", law_factory=lambda: QuarticLaw(N, a), curvature=curvature)


def quadratic_potential(dim: int) -> PotentialSpec:
    """V(x) = |x|^2/2 (Ornstein-Uhlenbeck): rho = 1, k = 0, B = 0, M0 = M1 = M2 = 1."""

    def V(x):
        return 0.5 * np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)

    zero3 = lambda x, u, v: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))
    zero4 = lambda x, u, v, w: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(u)))
    return PotentialSpec(
        dim=dim, V=V, grad=lambda x: np.asarray(x, dtype=float).copy(),
        hess_action=lambda x, u: np.broadcast_to(u, np.broadcast_shapes(np.shape(x), np.shape(u))).astype(float),
        d3_action=zero3, d4_action=zero4,
        rho=lambda x: np.ones(np.shape(x)[:-1]), c1=1.0, c2=1.0, k=0.0, B=0.0,
        M0=1.0, M1=1.0, M2=1.0, name=f"quadratic(d={dim})",
        law_factory=lambda: GaussLaw(dim), curvature=lambda x: np.ones(np.shape(x)[:-1]))


# ---------------------------------------------------------------------------
# Assumption audit
# ---------------------------------------------------------------------------

@dataclass
class AssumptionReport:
    margins: dict
    witnesses: dict
    hessian_symmetry: float
    hessian_fd_error: float
    probes: int

    @property
    def worst(self) -> float:
        return min(self.margins.values())


def _margins(spec: PotentialSpec, x, u, v, w):
    """All inequality margins at unit directions (positive means satisfied)."""
    r = _norm(x)
    rho = spec.rho(x)
    lower = spec.c1 * r ** spec.k * (r >= spec.B)
    out = {
        "rho_lower": rho - lower,
        "rho_upper": spec.c2 * r ** spec.k - rho,
        "hessian": np.sum(u * spec.hess_action(x, u), axis=-1) - rho,
        "third": spec.M1 * (1 + rho) / (1 + r) - _norm(spec.d3_action(x, u, v)),
        "fourth": spec.M2 * (1 + rho) / (1 + r) ** 2 - _norm(spec.d4_action(x, u, v, w)),
    }
    if spec.k == 0:
        out["hessian_bound"] = spec.M0 - _norm(spec.hess_action(x, u))
    return out


def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def assumption_check(spec: PotentialSpec, trials: int = 2000, seed=0, radius: float = 10.0,
                     raise_on_violation: bool = True) -> AssumptionReport:
    """Probe the curvature and derivative inequalities at random and aligned points."""
    if trials < 1:
        raise DomainError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    d = spec.dim
    xr = _unit(rng.standard_normal((trials, d))) * rng.uniform(0, radius, (trials, 1))
    dirs = [_unit(rng.standard_normal((trials, d))) for _ in range(3)]
    # aligned probes on a radial grid (directions along x are extremal for radial V)
    radii = np.linspace(0.0, radius, 201)
    e = _unit(rng.standard_normal(d))
    xa = radii[:, None] * e
    ua = np.tile(e, (len(radii), 1))
    X = np.concatenate([xr, xa])
    U, Vv, Ww = (np.concatenate([dd, ua]) for dd in dirs)
    m = _margins(spec, X, U, Vv, Ww)
    margins, witnesses = {}, {}
    for key, vals in m.items():
        j = int(np.argmin(vals))
        margins[key] = float(vals[j])
        witnesses[key] = {"x": X[j].tolist(), "u": U[j].tolist(), "v": Vv[j].tolist(), "w": Ww[j].tolist()}
    # Hessian audit: symmetry <v,Hu> = <u,Hv> and agreement with differences of grad
    sym = float(np.max(np.abs(np.sum(Vv * spec.hess_action(X, U), -1) - np.sum(U * spec.hess_action(X, Vv), -1))
                       / (1 + spec.curvature_at(X[:1]) + _norm(X) ** 2)))
    h = 1e-5
    fd_rel = 0.0
    for j in range(min(100, trials)):
        x, u = xr[j], dirs[0][j]
        scale = 1 + np.linalg.norm(x)
        step = h * scale
        fd = (spec.grad(x + step * u) - spec.grad(x - step * u)) / (2 * step)
        ex = spec.hess_action(x, u)
        fd_rel = max(fd_rel, float(np.linalg.norm(fd - ex) / max(np.linalg.norm(ex), 1e-12)))
    rep = AssumptionReport(margins, witnesses, sym, fd_rel, len(X))
    if raise_on_violation:
        bad = [k for k, v in margins.items() if v < -MARGIN_TOL]
        if bad:
            k = bad[0]
            raise AssumptionViolated(f"inequality '{k}' fails with margin {margins[k]:.3g}", witnesses[k])
    return rep


# ---------------------------------------------------------------------------
# Constant chain
# ---------------------------------------------------------------------------

def eta(spec: PotentialSpec) -> float:
    """min(1/(4B^2), (c1/(4(k+1)))^(2/(k+2))); B = 0 drops the first branch."""
    second = (spec.c1 / (4.0 * (spec.k + 1.0))) ** (2.0 / (spec.k + 2.0))
    if spec.B == 0:
        return second
    return min(1.0 / (4.0 * spec.B ** 2), second)


FORMULAS = {
    "eta": "min(1/(4 B^2), (c1/(4(k+1)))^(2/(k+2)))",
    "chi": "c1 * B^k",
    "m1_mu": "int |x| mu(dx)",
    "tail_mass": "mu(|x| > B + 1)",
    "t0": "(eta + 2B + 2 m1_mu) / (eta * tail_mass)",
    "t1": "max(2 t0, log(4 t0 / (1 - exp(-chi))) / chi)",
    "J_2t0": "1 - (1 - exp(-chi)) / (4 t0)",
    "C1": "1 / sqrt(J(2 t0))",
    "theta": "log(1 / J(2 t0)) / (2 t1)",
    "C2": "sqrt(2) M1 sqrt(1 + C1^2 / theta^2)",
    "s_m12": "2 C1",
    "s_0": "C1 C2",
    "q_m1": "4 sqrt(2) C1",
    "q_m12": "2 (2 + sqrt(2)) C1 C2",
    "q_0": "C1 (C2^2 + 3 M1^2 / 2 + M2)",
    "q_1": "C1 (3 M1^2 + M2) / 2",
    "q_2": "3 C1 M1^2 / 8",
    "K1": "C1 / theta",
    "K2": "2 s_0 / theta + sqrt(2 pi / theta) s_m12",
    "K3": "2 (s_0 + 2 s_m12) + 128 q_2/theta^3 + 16 q_1/theta^2 + 4 q_0/theta"
          " + 2 sqrt(pi) q_m12 / sqrt(theta) + 4 (1 + |log(theta/4)|) q_m1",
}


@dataclass
class ErgodicityConstants:
    eta: float
    chi: float
    m1_mu: float
    tail_mass: float
    t0: float
    t1: float
    J_2t0: float
    C1: float
    theta: float
    C2: float
    s_m12: float
    s_0: float
    q_m1: float
    q_m12: float
    q_0: float
    q_1: float
    q_2: float
    K1: float
    K2: float
    K3: float
    M1: float
    M2: float
    B: float
    m1_closed_form: float = float("nan")
    tail_closed_form: float = float("nan")
    inputs: dict = field(default_factory=dict)

    def J(self, t):
        return 1.0 - (-math.expm1(-self.chi)) / (2.0 * np.asarray(t, dtype=float))

    def P(self, t):
        t = np.asarray(t, dtype=float)
        return (1.5 * self.M1 ** 2 * (t + 1.0) + self.M2) * (t + 1.0)

    def S(self, t):
        return self.s_m12 / np.sqrt(t) + self.s_0

    def Q(self, t):
        t = np.asarray(t, dtype=float)
        return self.q_m1 / t + self.q_m12 / np.sqrt(t) + self.q_0 + self.q_1 * t + self.q_2 * t * t

    def first_variation_bound(self, t):
        """C1^2 exp(-2 theta t) (per unit |u|^2)."""
        return self.C1 ** 2 * np.exp(-2.0 * self.theta * np.asarray(t, dtype=float))

    def e_bound(self, s, t):
        """Stated bound C2^2 exp(-2 theta (t - s)) on E exp(-2 int rho)."""
        return self.C2 ** 2 * np.exp(-2.0 * self.theta * (np.asarray(t) - np.asarray(s)))

    def e_bound_from_proof(self, s, t):
        """The sharper C1^2 exp(-2 theta (t - s)) that the argument actually delivers."""
        return self.C1 ** 2 * np.exp(-2.0 * self.theta * (np.asarray(t) - np.asarray(s)))

    def to_dict(self) -> dict:
        d = asdict(self)
        inputs = d.pop("inputs")
        out = {k: {"value": v, "formula": FORMULAS.get(k, "")} for k, v in d.items()}
        out["inputs"] = inputs
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def ergodic_constants(spec: PotentialSpec, law: Optional[RadialLaw] = None,
                      cross_check_tol: float = 1e-9) -> ErgodicityConstants:
    """Evaluate the full chain; mu-quantities come from radial quadrature."""
    if law is None:
        law = spec.law()
    chi = spec.c1 * spec.B ** spec.k if spec.k > 0 else spec.c1
    if chi <= 0:
        raise DegenerateConstantsError(
            "chi = c1 B^k vanishes (J is identically 1 and theta = 0); choose B > 0")
    et = eta(spec)
    R = spec.B + 1.0
    m1 = law.radial_moment_quad(1.0)
    tail = law.tail_mass_quad(R)
    m1_cf = law.radial_moment(1.0)
    tail_cf = 1.0 - law.radial_cdf(R)
    if abs(m1 - m1_cf) > cross_check_tol * m1_cf or abs(tail - tail_cf) > max(cross_check_tol * tail_cf, 1e-15):
        raise DegenerateConstantsError(f"quadrature disagrees with closed form: m1 {m1} vs {m1_cf}, "
                                       f"tail {tail} vs {tail_cf}")
    if tail <= 0:
        raise DegenerateConstantsError("mu(|x| > B + 1) underflows to zero")
    one_m = -math.expm1(-chi)
    t0 = (et + 2.0 * spec.B + 2.0 * m1) / (et * tail)
    t1 = max(2.0 * t0, math.log(4.0 * t0 / one_m) / chi)
    J2 = 1.0 - one_m / (4.0 * t0)
    log_inv_J = -math.log1p(-one_m / (4.0 * t0))
    C1 = 1.0 / math.sqrt(J2)
    theta = log_inv_J / (2.0 * t1)
    M1, M2 = spec.M1, spec.M2
    C2 = math.sqrt(2.0) * M1 * math.sqrt(1.0 + C1 ** 2 / theta ** 2)
    s_m12 = 2.0 * C1
    s_0 = C1 * C2
    q_m1 = 4.0 * math.sqrt(2.0) * C1
    q_m12 = 2.0 * (2.0 + math.sqrt(2.0)) * C1 * C2
    q_0 = C1 * (C2 ** 2 + 1.5 * M1 ** 2 + M2)
    q_1 = C1 * (3.0 * M1 ** 2 + M2) / 2.0
    q_2 = 3.0 * C1 * M1 ** 2 / 8.0
    K1 = C1 / theta
    K2 = 2.0 * s_0 / theta + math.sqrt(2.0 * math.pi / theta) * s_m12
    K3 = (2.0 * (s_0 + 2.0 * s_m12) + 128.0 * q_2 / theta ** 3 + 16.0 * q_1 / theta ** 2
          + 4.0 * q_0 / theta + 2.0 * math.sqrt(math.pi) * q_m12 / math.sqrt(theta)
          + 4.0 * (1.0 + abs(math.log(theta / 4.0))) * q_m1)
    inputs = {"potential": spec.name, "dim": spec.dim, "c1": spec.c1, "c2": spec.c2,
              "k": spec.k, "B": spec.B, "M0": spec.M0, "M1": M1, "M2": M2}
    return ErgodicityConstants(
        eta=et, chi=chi, m1_mu=m1, tail_mass=tail, t0=t0, t1=t1, J_2t0=J2, C1=C1, theta=theta,
        C2=C2, s_m12=s_m12, s_0=s_0, q_m1=q_m1, q_m12=q_m12, q_0=q_0, q_1=q_1, q_2=q_2,
        K1=K1, K2=K2, K3=K3, M1=M1, M2=M2, B=spec.B, m1_closed_form=m1_cf,
        tail_closed_form=tail_cf, inputs=inputs)
