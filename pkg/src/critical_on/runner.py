"""Experiment orchestration: configuration, seeding, sweeps, reports and manifests."""

import copy
import csv
import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import __version__
from . import constants as K
from . import langevin as L
from . import pair_diag, specfun, spin_model, transport
from .errors import ConfigError, CriticalOnError, DomainError, InstanceTooLargeError, SizeMismatchError
from .limit_laws import GaussLaw, QuarticLaw, radial_bump, linear_function, sample_gauss, sample_quartic
from .pair_diag import RateEstimate

THREADS_ENV = "CRITICAL_ON_THREADS"

# thresholds, echoed into every stage summary
IDENTITY_TOL = 1e-12
BESSEL_REL_TOL = 1e-10
TAYLOR_MIN_SLOPE = 5.8
PAIR_IDENTITY_TOL = 1e-10
PAIR_SLOPE_WINDOW = (-0.8, -0.3)
RATE_SLOPE_WINDOW = (-0.8, -0.25)
MONOTONE_SE = 2.0
SE_SLACK = 4.0
FD_STEP = 1e-3
FLOOR_REPEATS = 4

STAGES = ("specfun", "pair", "constants", "langevin", "critical", "subcritical",
          "spins", "limit", "wasserstein")
LANGEVIN_CHECKS = ("variation", "decay", "bel", "stein", "ergodic")

_POW2 = [2 ** k for k in range(4, 11)]

DEFAULTS = {
    "experiment": "default",
    "seed": 20240611,
    "out": "report",
    "model": {"N": 2, "beta": None, "n_grid": _POW2},
    "sampler": {"burn_in": 1000, "thin": 10, "replicas": 10, "samples": 100000},
    "transport": {"method": "exact", "exact_m": 500},
    "subcritical": {"N": None, "beta": 1.0},
    "specfun": {"N_values": list(range(2, 11)), "points": 100, "taylor_N": [2, 3, 5]},
    "pair": {"n_grid": _POW2, "samples_per_replica": 1000, "replicas": 10,
             "pairs_per_config": 8, "burn_in": 1000, "thin": 10},
    "constants": {"model": "quartic", "B": 1.0},
    "langevin": {"model": "quartic", "x0": None, "t": 4.0, "dt": 1e-3, "replicas": 1000,
                 "checks": list(LANGEVIN_CHECKS), "stein_T": 24.0, "ergodic_samples": 1000},
    "spins": {"n": 64, "count": 1000},
    "limit": {"law": "quartic", "count": 10000},
    "wasserstein": {"a": None, "b": None, "on_mismatch": "error"},
}

_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_num = {"type": "number"}
_pos_num = {"type": "number", "exclusiveMinimum": 0}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


SCHEMA = _obj({
    "experiment": {"type": "string", "minLength": 1},
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string", "minLength": 1},
    "model": _obj({
        "N": {"type": "integer", "minimum": 2},
        "beta": {"type": ["number", "null"], "minimum": 0},
        "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
    }),
    "sampler": _obj({"burn_in": _pos_int, "thin": _pos_int,
                     "replicas": {"type": "integer", "minimum": 2}, "samples": _pos_int}),
    "transport": _obj({"method": {"enum": ["exact", "sliced", "none"]},
                       "exact_m": {"type": "integer", "minimum": 2}}),
    "subcritical": _obj({"N": {"type": ["integer", "null"], "minimum": 2},
                         "beta": {"type": "number", "minimum": 0}}),
    "specfun": _obj({
        "N_values": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "points": {"type": "integer", "minimum": 2},
        "taylor_N": {"type": "array", "items": {"type": "integer", "minimum": 2}},
    }),
    "pair": _obj({
        "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "samples_per_replica": _pos_int, "replicas": {"type": "integer", "minimum": 2},
        "pairs_per_config": _pos_int, "burn_in": _pos_int, "thin": _pos_int,
    }),
    "constants": _obj({"model": {"enum": ["quartic", "quadratic"]},
                       "B": {"type": "number", "minimum": 0}}),
    "langevin": _obj({
        "model": {"enum": ["quartic", "quadratic"]},
        "x0": {"type": ["array", "null"], "items": _num},
        "t": _pos_num, "dt": _pos_num,
        "replicas": {"type": "integer", "minimum": 2},
        "checks": {"type": "array", "items": {"enum": list(LANGEVIN_CHECKS)}},
        "stein_T": _pos_num,
        "ergodic_samples": {"type": "integer", "minimum": 2},
    }),
    "spins": _obj({"n": {"type": "integer", "minimum": 2}, "count": _pos_int}),
    "limit": _obj({"law": {"enum": ["quartic", "gauss"]}, "count": _pos_int}),
    "wasserstein": _obj({"a": {"type": ["string", "null"]}, "b": {"type": ["string", "null"]},
                         "on_mismatch": {"enum": ["error", "resample"]}}),
})


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class _Block(dict):
    """Read-only attribute view of one config section."""

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError as exc:
            raise AttributeError(name) from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; build it with ``from_dict`` or ``load_config``."""

    data: dict

    @classmethod
    def from_dict(cls, raw: Optional[dict] = None) -> "ExperimentConfig":
        raw = {} if raw is None else raw
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        cfg = cls(_merge(DEFAULTS, raw))
        cfg._check()
        return cfg

    def __getattr__(self, name):
        if name in DEFAULTS and isinstance(DEFAULTS[name], dict):
            return _Block(self.data[name])
        if name in DEFAULTS:
            return self.data[name]
        raise AttributeError(name)

    @property
    def N(self) -> int:
        return self.data["model"]["N"]

    @property
    def beta(self) -> float:
        b = self.data["model"]["beta"]
        return float(self.N) if b is None else float(b)

    @property
    def sub_N(self) -> int:
        n = self.data["subcritical"]["N"]
        return self.N if n is None else n

    @property
    def x0(self) -> list:
        x = self.data["langevin"]["x0"]
        return [2.0] + [0.0] * (self.N - 1) if x is None else [float(v) for v in x]

    def _check(self):
        d = self.data
        if self.beta > self.N:
            raise ConfigError(f"beta = {self.beta:g} > N = {self.N}: the model is only defined up to criticality")
        for key, grid in (("model.n_grid", d["model"]["n_grid"]), ("pair.n_grid", d["pair"]["n_grid"])):
            if list(grid) != sorted(set(grid)):
                raise ConfigError(f"{key} must be strictly increasing")
        if d["subcritical"]["beta"] >= self.sub_N:
            raise ConfigError("subcritical.beta must be < N")
        s = d["sampler"]
        if s["samples"] < s["replicas"]:
            raise ConfigError("sampler.samples must be >= sampler.replicas")
        if len(self.x0) != self.N:
            raise ConfigError(f"langevin.x0 has length {len(self.x0)}, expected N = {self.N}")
        lg = d["langevin"]
        steps = lg["t"] / lg["dt"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) % 8:
            raise ConfigError("langevin.t must be a multiple of 8 * dt (the check grid is t/8, t/4, t/2, t)")

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Apply dotted-key overrides (``{"model.N": 3}``) and revalidate."""
        raw = copy.deepcopy(self.data)
        for key, val in changes.items():
            node = raw
            *head, last = key.split(".")
            for h in head:
                node = node[h]
            node[last] = val
        return ExperimentConfig.from_dict(raw)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def load_config(path) -> ExperimentConfig:
    """Read a JSON config; a manifest file is accepted and its config echo is reused."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if isinstance(raw, dict) and "artifact_version" in raw and "config" in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# seeds, workers, persistence
# ---------------------------------------------------------------------------

def derive_seed(seed: int, *key: int) -> int:
    """Deterministic 63-bit child seed of ``seed`` along an integer key path."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def stage_seed(seed: int, stage: str) -> int:
    return derive_seed(seed, STAGES.index(stage))


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _map(fn, items, workers=None):
    """Ordered map; cells are independent and seeded, so the merge is deterministic."""
    items = list(items)
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, *zip(*items)))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows) -> Path:
    """Header row plus rows in the given column order; floats as shortest round-trip repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def write_plot_data(path, x, y, xname="x", yname="y") -> Path:
    return write_csv(path, [xname, yname], [{xname: a, yname: b} for a, b in zip(x, y)])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageRecord:
    seed: int
    wall_clock_s: float
    passed: bool
    error: Optional[str] = None


@dataclass
class RunManifest:
    config: dict
    artifact_version: str
    stages: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    platform: dict = field(default_factory=dict)
    total_wall_clock_s: float = 0.0

    def record(self, name, seed, seconds, passed, error=None):
        self.stages[name] = StageRecord(int(seed), float(seconds), bool(passed), error)

    def digest_outputs(self, out_dir):
        out_dir = Path(out_dir)
        self.outputs = {
            str(p.relative_to(out_dir)): sha256_file(p)
            for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name != "manifest.json"
        }

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.stages.values())

    def to_dict(self):
        return {"config": self.config, "artifact_version": self.artifact_version,
                "stages": {k: v.__dict__ for k, v in self.stages.items()},
                "outputs": self.outputs, "platform": self.platform,
                "total_wall_clock_s": self.total_wall_clock_s, "passed": self.passed}

    def write(self, out_dir) -> Path:
        return write_json(Path(out_dir) / "manifest.json", self.to_dict())


def new_manifest(cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(cfg.to_dict(), __version__, platform={
        "python": platform.python_version(), "numpy": np.__version__,
        "machine": platform.machine(), "system": platform.system(),
    })


# ---------------------------------------------------------------------------
# rate sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    estimate: RateEstimate
    rows: list
    monotone: bool
    floor: float
    floor_sd: float
    csv_path: Optional[Path] = None

    def in_window(self, window=RATE_SLOPE_WINDOW) -> bool:
        s = self.estimate.fitted_slope
        return s is not None and window[0] <= s <= window[1]

    def summary(self) -> dict:
        return {"rate": self.estimate.as_dict(), "monotone": self.monotone,
                "floor": self.floor, "floor_sd": self.floor_sd,
                "slope_window": list(RATE_SLOPE_WINDOW), "monotone_se": MONOTONE_SE,
                "slope_in_window": self.in_window()}


def _jackknife_se(loo) -> float:
    loo = np.asarray(loo, dtype=float)
    R = loo.size
    return math.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2))


def fit_pooled_rate(n_grid, pooled, loo, label="", z=1.96) -> RateEstimate:
    """OLS log-log slope of pooled estimates; SEs from delete-one-replica values.

    ``loo`` has shape (len(n_grid), R) and holds the statistic recomputed with
    replica r left out. A single grid point leaves the slope undefined.
    """
    pooled = np.asarray(pooled, dtype=float)
    loo = np.asarray(loo, dtype=float)
    ses = [_jackknife_se(row) for row in loo]
    if len(n_grid) < 2:
        return RateEstimate(list(n_grid), pooled.tolist(), ses, None, None, None, label)
    slope = pair_diag._ols_slope(n_grid, pooled)
    loo_slopes = [pair_diag._ols_slope(n_grid, loo[:, r]) for r in range(loo.shape[1])]
    se = _jackknife_se(loo_slopes)
    return RateEstimate(list(n_grid), pooled.tolist(), ses, slope, (slope - z * se, slope + z * se),
                        se, label)


def monotone_within(values, ses, k=MONOTONE_SE) -> bool:
    """Each step may rise by at most k joint standard errors."""
    return all(b - a <= k * math.hypot(sa, sb)
               for a, b, sa, sb in zip(values, values[1:], ses, ses[1:]))


def _radial_metric(W, Y):
    return transport.w1_sorted_1d(np.linalg.norm(W, axis=1), np.linalg.norm(Y, axis=1)).cost


def _componentwise_metric(W, Y):
    return float(np.mean([transport.w1_sorted_1d(W[:, i], Y[:, i]).cost for i in range(W.shape[1])]))


def _block_ids(count, replicas):
    return np.repeat(np.arange(replicas), spin_model._split(count, replicas))


def _full_dim(W, Y, method, m, seed):
    if method == "none":
        return None
    idx = np.linspace(0, len(W) - 1, min(m, len(W))).round().astype(int)
    a, b = W[idx], Y[: len(idx)]
    if method == "exact":
        return transport.w1_exact(a, b).cost
    return transport.w1_sliced(a, b, seed=seed).cost


def _sweep_cell(kind, N, n, beta, m, burn_in, thin, R, seed, method, exact_m):
    """One n: samples, pooled 1D metric, delete-one-replica values, full-dimensional metric."""
    chain = spin_model.sample_magnetization(N, n, beta, m, seed=derive_seed(seed, 0),
                                            burn_in=burn_in, thin=thin, replicas=R)
    if kind == "critical":
        W = chain.W
        Y = sample_quartic(QuarticLaw(N), m, seed=derive_seed(seed, 1))
        metric = _radial_metric
    else:
        W = math.sqrt(N - beta) * chain.S / math.sqrt(n)
        Y = sample_gauss(N, m, seed=derive_seed(seed, 1))
        metric = _componentwise_metric
    blocks = _block_ids(m, R)
    pooled = metric(W, Y)
    loo = [metric(W[chain.replica != r], Y[blocks != r]) for r in range(R)]
    row = {"n": n, "metric": pooled, "full_dim": _full_dim(W, Y, method, exact_m, derive_seed(seed, 2)),
           "max_drift": chain.max_drift}
    if kind == "subcritical":
        cov = np.cov(W.T)
        row["cov_max_dev"] = float(np.max(np.abs(cov - np.eye(N))))
    return row, loo


def _floor(kind, N, m, seed, repeats=FLOOR_REPEATS):
    """Mean and sd of the metric between two independent m-samples of the target law."""
    vals = []
    for r in range(repeats):
        if kind == "critical":
            law = QuarticLaw(N)
            a = sample_quartic(law, m, seed=derive_seed(seed, r, 0))
            b = sample_quartic(law, m, seed=derive_seed(seed, r, 1))
            vals.append(_radial_metric(a, b))
        else:
            a = sample_gauss(N, m, seed=derive_seed(seed, r, 0))
            b = sample_gauss(N, m, seed=derive_seed(seed, r, 1))
            vals.append(_componentwise_metric(a, b))
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if repeats > 1 else 0.0


def _rate_sweep(kind, cfg: ExperimentConfig, N, beta, seed, out_dir):
    s, tr = cfg.sampler, cfg.transport
    grid = list(cfg.model.n_grid)
    cells = [(kind, N, int(n), beta, s.samples, s.burn_in, s.thin, s.replicas,
              derive_seed(seed, g), tr.method, tr.exact_m) for g, n in enumerate(grid)]
    results = _map(_sweep_cell, cells)
    rows = [r for r, _ in results]
    loo = np.array([l for _, l in results])
    label = "radial_w1" if kind == "critical" else "componentwise_w1"
    est = fit_pooled_rate(grid, [r["metric"] for r in rows], loo, label=label)
    for r, se in zip(rows, est.std_errors):
        r.update(se=se, N=N, beta=beta, samples=s.samples, replicas=s.replicas,
                 full_dim_m=min(tr.exact_m, s.samples), full_dim_method=tr.method)
    floor, floor_sd = _floor(kind, N, s.samples, derive_seed(seed, len(grid) + 1))
    cols = ["n", "N", "beta", "samples", "replicas", "metric", "se", "full_dim", "full_dim_method",
            "full_dim_m", "max_drift"] + (["cov_max_dev"] if kind == "subcritical" else [])
    res = SweepResult(est, rows, monotone_within(est.values, est.std_errors), floor, floor_sd)
    if out_dir is not None:
        out_dir = Path(out_dir)
        res.csv_path = write_csv(out_dir / f"rate_{kind}.csv", cols, rows)
        write_json(out_dir / f"rate_{kind}.json", res.summary())
        write_plot_data(out_dir / "plots" / f"rate_{kind}.csv", grid, est.values, "n", label)
        from . import plotting
        plotting.rate_figure(out_dir / "figures" / f"rate_{kind}.png", grid, est.values,
                             est.std_errors, est.fitted_slope, floor,
                             title=f"{kind}: N={N}, beta={beta:g}", ylabel=label)
    return res


def rate_sweep_critical(cfg: ExperimentConfig, out_dir=None, seed=None) -> SweepResult:
    """Radial 1D W1 between |W_n|, W_n = n^{-3/4} S_n at beta = N, and |Y| for the quartic law."""
    if cfg.beta != cfg.N:
        raise ConfigError(f"critical sweep needs beta = N, got beta = {cfg.beta:g}, N = {cfg.N}")
    seed = stage_seed(cfg.seed, "critical") if seed is None else seed
    return _rate_sweep("critical", cfg, cfg.N, float(cfg.N), seed, out_dir)


def rate_sweep_subcritical(cfg: ExperimentConfig, out_dir=None, seed=None, N=None, beta=None) -> SweepResult:
    """Componentwise 1D W1 between sqrt(N - beta) S_n / sqrt(n) and the standard Gaussian."""
    N = cfg.sub_N if N is None else int(N)
    beta = float(cfg.subcritical.beta if beta is None else beta)
    if not beta < N:
        raise ConfigError(f"subcritical sweep needs beta < N, got beta = {beta:g}, N = {N}")
    seed = stage_seed(cfg.seed, "subcritical") if seed is None else seed
    return _rate_sweep("subcritical", cfg, N, beta, seed, out_dir)


# ---------------------------------------------------------------------------
# report stages; each returns a JSON-ready summary with a "passed" flag
# ---------------------------------------------------------------------------

def stage_specfun(cfg: ExperimentConfig, seed, out_dir=None) -> dict:
    sp = cfg.specfun
    rows, ident, bessel = [], 0.0, 0.0
    for N in sp.N_values:
        for x, f, g, res, tay in specfun.specfun_table(N, sp.points):
            rows.append({"N": N, "x": x, "f": f, "g": g, "identity_residual": res,
                         "taylor_residual": None if math.isnan(tay) else tay})
            ident = max(ident, abs(res))
        for nu in (N / 2 - 1, N / 2):
            for x in np.linspace(0.1, 1.0, 10) * N:
                o = specfun.u_nu_bessel(nu, x)
                bessel = max(bessel, abs(specfun.u_nu(nu, x).value - o) / o)
    taylor = {N: specfun.taylor_order_fit(specfun.ModelFunctions(N))[0] for N in sp.taylor_N}
    out = {"max_identity_residual": ident, "max_series_bessel_rel": bessel,
           "taylor_slopes": taylor,
           "thresholds": {"identity": IDENTITY_TOL, "bessel_rel": BESSEL_REL_TOL,
                          "taylor_min_slope": TAYLOR_MIN_SLOPE}}
    out["passed"] = (ident <= IDENTITY_TOL and bessel <= BESSEL_REL_TOL
                     and all(s >= TAYLOR_MIN_SLOPE for s in taylor.values()))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "specfun_table.csv",
                  ["N", "x", "f", "g", "identity_residual", "taylor_residual"], rows)
        write_json(out_dir / "specfun.json", out)
        N0 = sp.N_values[0]
        sel = [r for r in rows if r["N"] == N0]
        write_plot_data(out_dir / "plots" / f"specfun_f_N{N0}.csv", [r["x"] for r in sel],
                        [r["f"] for r in sel], "x", "f")
        from . import plotting
        curves = {f"f_{N}": [r["f"] for r in rows if r["N"] == N] for N in sp.N_values}
        plotting.curve_figure(out_dir / "figures" / "specfun_f.png", [r["x"] for r in sel], curves,
                              title="f_N on [0, 1]", xlabel="x", ylabel="f_N(x)")
    return out


def stage_pair(cfg: ExperimentConfig, seed, out_dir=None) -> dict:
    p = cfg.pair
    sw = pair_diag.pair_sweep(cfg.N, p.n_grid, p.samples_per_replica, p.replicas, seed=seed,
                              burn_in=p.burn_in, thin=p.thin, pairs_per_config=p.pairs_per_config)
    gated = ("R1", "R2", "third")
    slopes = {k: sw.rates[k].fitted_slope for k in gated}
    in_window = {k: s is not None and PAIR_SLOPE_WINDOW[0] <= s <= PAIR_SLOPE_WINDOW[1]
                 for k, s in slopes.items()}
    grad = pair_diag.gradient_consistency(cfg.N)
    out = {"N": cfg.N, "rates": {k: r.as_dict() for k, r in sw.rates.items()},
           "max_mean_residual": sw.max_mean_residual, "max_cov_residual": sw.max_cov_residual,
           "max_delta_ratio": sw.max_delta_ratio, "third_bound_ok": sw.third_bound_ok,
           "gradient_identity_exact": grad == 0, "slopes_in_window": in_window,
           "thresholds": {"identity": PAIR_IDENTITY_TOL, "slope_window": list(PAIR_SLOPE_WINDOW),
                          "third_bound": "32 N / sqrt(n) + 4 SE"}}
    single = len(p.n_grid) < 2
    out["passed"] = bool(
        sw.max_mean_residual <= PAIR_IDENTITY_TOL and sw.max_cov_residual <= PAIR_IDENTITY_TOL
        and sw.third_bound_ok and grad == 0 and sw.max_delta_ratio <= 1.0 + 1e-12
        and (single or all(in_window.values())))
    if out_dir is not None:
        out_dir = Path(out_dir)
        cols = ["n", "replica"] + list(pair_diag.DIAGNOSTICS)
        write_csv(out_dir / "pair_replicas.csv", cols, sw.rows)
        rate_rows = [{"label": k, "fitted_slope": r.fitted_slope, "slope_se": r.slope_se,
                      "ci_low": None if r.slope_ci is None else r.slope_ci[0],
                      "ci_high": None if r.slope_ci is None else r.slope_ci[1]}
                     for k, r in sw.rates.items()]
        write_csv(out_dir / "pair_rates.csv", ["label", "fitted_slope", "slope_se", "ci_low", "ci_high"],
                  rate_rows)
        write_json(out_dir / "pair.json", out)
        for k in gated:
            write_plot_data(out_dir / "plots" / f"pair_{k}.csv", sw.n_grid, sw.rates[k].values, "n", k)
        from . import plotting
        plotting.multi_rate_figure(out_dir / "figures" / "pair_rates.png", sw.n_grid,
                                   {k: (sw.rates[k].values, sw.rates[k].std_errors) for k in gated},
                                   title=f"remainder terms, N={cfg.N}")
    return out


def potential_for(model: str, N: int, B: float = 1.0):
    if model == "quartic":
        return K.quartic_potential(N, B=B)
    if model == "quadratic":
        return K.quadratic_potential(N)
    raise ConfigError(f"unknown model {model!r}")


def stage_constants(cfg: ExperimentConfig, seed, out_dir=None) -> dict:
    c = cfg.constants
    spec = potential_for(c.model, cfg.N, c.B)
    rep = K.assumption_check(spec, trials=2000, seed=seed % (2 ** 32), raise_on_violation=False)
    out = {"model": spec.name, "B": spec.B, "assumption_worst_margin": rep.worst,
           "hessian_symmetry": rep.hessian_symmetry, "hessian_fd_error": rep.hessian_fd_error}
    try:
        chain = K.ergodic_constants(spec)
        out["constants"] = json.loads(chain.to_json())
        out["passed"] = bool(rep.worst >= -K.MARGIN_TOL)
    except CriticalOnError as exc:
        out["constants"] = None
        out["error"] = str(exc)
        out["passed"] = False
    out["thresholds"] = {"margin_tol": K.MARGIN_TOL}
    if out_dir is not None:
        write_json(Path(out_dir) / "constants.json", out)
    return out


def _check_variation(cfg, spec, chain, seed):
    lg = cfg.langevin
    T, dt, R = lg.t, lg.dt, lg.replicas
    grid = [T / 8, T / 4, T / 2, T]
    rep = L.variation_moment_check(spec, chain, grid, replicas=R, seed=seed, x=cfg.x0, dt=dt,
                                   raise_on_violation=False)
    # OU in the same dimension: first variation and mean are geometric in (1 - dt)
    ou = K.quadratic_potential(spec.dim)
    u = np.eye(spec.dim)[0]
    steps = round(T / dt)
    p = L.simulate(ou, cfg.x0, dt, T, {"u": u}, seed=derive_seed(seed, 1), replicas=R,
                   record_every=steps)
    discrete = (1.0 - dt) ** steps
    u1_err = float(np.max(np.abs(p.U1["u"][-1] - discrete * u)))
    mean = p.X[-1].mean(axis=0)
    se = p.X[-1].std(axis=0, ddof=1) / math.sqrt(R)
    x0 = np.asarray(cfg.x0)
    integ = abs(math.exp(-T) - discrete) * np.abs(x0)
    ou_ok = bool(u1_err <= 1e-12 and np.all(np.abs(mean - discrete * x0) <= SE_SLACK * se)
                 and np.all(np.abs(mean - math.exp(-T) * x0) <= SE_SLACK * se + integ + 1e-15))
    coarse, fine, pse = L.dt_audit(spec, radial_bump(1.0), cfg.x0, T / 4, replicas=R,
                                   seed=derive_seed(seed, 2), dt=dt)
    return {"variation": rep.as_dict(), "ou": {"u1_max_error": u1_err, "mean": mean, "mean_se": se,
                                               "discrete_factor": discrete, "exp_factor": math.exp(-T),
                                               "integrator_error": integ, "passed": ou_ok},
            "dt_audit": {"coarse": coarse, "fine": fine, "paired_se": pse, "gated": False},
            "passed": bool(rep.passed and ou_ok)}


def _check_decay(cfg, spec, chain, seed):
    lg = cfg.langevin
    T = lg.t
    pairs = [(0.0, T / 4), (T / 8, T / 2), (T / 4, T)]
    ests = L.decay_E_grid(spec, cfg.x0, pairs, replicas=lg.replicas, seed=seed, dt=lg.dt)
    rows = []
    for (s, t), e in zip(pairs, ests):
        bound = float(chain.e_bound(s, t))
        rows.append({"s": s, "t": t, "value": e.value, "se": e.std_error, "bound": bound,
                     "ok": e.value <= bound + SE_SLACK * e.std_error})
    return {"rows": rows, "passed": all(r["ok"] for r in rows)}


def _check_bel(cfg, spec, chain, seed):
    """Order-1 Elworthy-Li against a central difference on common noise.

    The joint SE is the paired per-path SE of (EL - FD). The unpaired
    combination is reported too; divided by 2*eps it is far too loose to gate.
    """
    lg = cfg.langevin
    h = radial_bump(0.8)
    t = lg.t / 4
    steps = round(t / lg.dt)
    x = np.asarray(cfg.x0, dtype=float)
    u = np.ones(spec.dim) / math.sqrt(spec.dim)
    el = L.elworthy_li(spec, h, x, t, 1, [u], replicas=lg.replicas, seed=seed, dt=lg.dt)
    path = L.simulate(spec, x, lg.dt, t, {"u": u}, seed=seed, replicas=lg.replicas, record_every=steps)
    el_paths = np.sum(h.grad_h(path.X[-1]) * path.U1["u"][-1], axis=-1)
    ends = [L.simulate(spec, x + sgn * FD_STEP * u, lg.dt, t, None, seed=seed, replicas=lg.replicas,
                       record_every=steps).X[-1] for sgn in (1.0, -1.0)]
    fd_paths = (h.h(ends[0]) - h.h(ends[1])) / (2 * FD_STEP)
    fd, fd_se = L._mean_se(fd_paths)
    diff, paired = L._mean_se(el_paths - fd_paths)
    unpaired = math.hypot(el.std_error, fd_se)
    agree = bool(abs(el.value - float(el_paths.mean())) <= 1e-12 * max(1.0, abs(el.value)))
    return {"el": el.value, "el_se": el.std_error, "fd": fd, "fd_se": fd_se, "joint_se": paired,
            "unpaired_se": unpaired, "mean_difference": diff, "t": t, "fd_step": FD_STEP,
            "routes_agree": agree, "passed": bool(agree and abs(el.value - fd) <= SE_SLACK * paired)}


def _check_stein(cfg, spec, chain, seed):
    lg = cfg.langevin
    ou = K.quadratic_potential(1)
    r_ou = L.stein_solution_check(ou, GaussLaw(1), linear_function([1.0]), [0.5], T_max=lg.stein_T,
                                  dt=lg.dt, replicas=max(2, lg.replicas // 5), seed=seed)
    x = np.zeros(spec.dim)
    x[0] = 0.5
    r_q = L.stein_solution_check(spec, spec.law(), radial_bump(1.0), x, T_max=lg.stein_T, dt=lg.dt,
                                 replicas=lg.replicas, seed=derive_seed(seed, 1))
    return {"ou": {**r_ou.__dict__, "passed": r_ou.passed},
            "model": {**r_q.__dict__, "passed": r_q.passed},
            "threshold": "residual <= 3 x budget", "passed": bool(r_ou.passed and r_q.passed)}


def _check_ergodic(cfg, spec, chain, seed):
    lg = cfg.langevin
    T = lg.t
    rep = L.geom_erg_check(spec, spec.law(), cfg.x0, [T / 8, T / 4, T / 2, T],
                           samples=lg.ergodic_samples, seed=seed, dt=lg.dt)
    return {**rep.as_dict(), "passed": bool(rep.passed)}


_CHECKS = {"variation": _check_variation, "decay": _check_decay, "bel": _check_bel,
           "stein": _check_stein, "ergodic": _check_ergodic}


def langevin_checks(cfg: ExperimentConfig, seed, checks=None, out_dir=None) -> dict:
    """Run the requested Langevin checks; constants come from this run's chain."""
    lg = cfg.langevin
    checks = list(lg.checks if checks is None else checks)
    spec = potential_for(lg.model, cfg.N, cfg.constants.B)
    try:
        chain = K.ergodic_constants(spec)
    except CriticalOnError as exc:
        raise ConfigError(f"constants unavailable for {spec.name}: {exc}") from None
    out = {"model": spec.name, "x0": cfg.x0, "t": lg.t, "dt": lg.dt, "replicas": lg.replicas,
           "se_slack": SE_SLACK, "constants": {"C1": chain.C1, "C2": chain.C2, "theta": chain.theta,
                                               "eta": chain.eta, "m1_mu": chain.m1_mu}}
    for j, name in enumerate(checks):
        out[name] = _CHECKS[name](cfg, spec, chain, derive_seed(seed, LANGEVIN_CHECKS.index(name)))
    out["passed"] = all(out[c]["passed"] for c in checks)
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_json(out_dir / "langevin.json", out)
        from . import plotting
        if "variation" in checks:
            v = out["variation"]["variation"]
            write_plot_data(out_dir / "plots" / "variation_u1_sq.csv", v["t_grid"], v["mean_u1_sq"],
                            "t", "mean_u1_sq")
            plotting.curve_figure(out_dir / "figures" / "variation.png", v["t_grid"],
                                  {"E|U1|^2": v["mean_u1_sq"], "E|U2|^2": v["mean_u2_sq"]},
                                  title="variation moments", xlabel="t", logy=True)
        if "ergodic" in checks:
            e = out["ergodic"]
            write_plot_data(out_dir / "plots" / "ergodic_w1.csv", e["t_grid"], e["w1"], "t", "w1")
            plotting.curve_figure(out_dir / "figures" / "ergodic.png", e["t_grid"],
                                  {"W1": e["w1"], "bound + floor": [b + e["allowance"] for b in e["bounds"]]},
                                  title="distance to equilibrium", xlabel="t", logy=True)
    return out


def stage_rates(cfg, seed, out_dir=None, kind="critical") -> dict:
    res = (rate_sweep_critical if kind == "critical" else rate_sweep_subcritical)(cfg, out_dir, seed=seed)
    out = res.summary()
    single = len(cfg.model.n_grid) < 2
    out["passed"] = bool(single or (res.monotone and res.in_window()))
    return out


def full_report(cfg: ExperimentConfig, out_dir=None, log=print) -> RunManifest:
    """All stages in sequence; returns the written manifest (``passed`` iff every stage passed)."""
    out_dir = Path(cfg.out if out_dir is None else out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = new_manifest(cfg)
    plan = [("specfun", stage_specfun), ("pair", stage_pair), ("constants", stage_constants),
            ("langevin", lambda c, s, o: langevin_checks(c, s, out_dir=o)),
            ("critical", lambda c, s, o: stage_rates(c, s, o, "critical")),
            ("subcritical", lambda c, s, o: stage_rates(c, s, o, "subcritical"))]
    summary = {}
    t_all = time.perf_counter()
    for name, fn in plan:
        seed = stage_seed(cfg.seed, name)
        t0 = time.perf_counter()
        try:
            res = fn(cfg, seed, out_dir)
            ok, err = bool(res["passed"]), None
        except (CriticalOnError, AssertionError, ArithmeticError) as exc:
            ok, err = False, f"{type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        man.record(name, seed, dt, ok, err)
        summary[name] = ok
        log(f"{name},{'pass' if ok else 'FAIL'},{dt:.1f}s" + (f",{err}" if err else ""))
    man.total_wall_clock_s = time.perf_counter() - t_all
    write_csv(out_dir / "summary.csv", ["stage", "passed"],
              [{"stage": k, "passed": v} for k, v in summary.items()])
    man.digest_outputs(out_dir)
    man.write(out_dir)
    return man


# ---------------------------------------------------------------------------
# single-purpose stages used by the CLI
# ---------------------------------------------------------------------------

def sample_spins(cfg: ExperimentConfig, seed, out_dir) -> dict:
    s, sp = cfg.sampler, cfg.spins
    count = sp.count
    chain = spin_model.sample_magnetization(cfg.N, sp.n, cfg.beta, count, seed=seed,
                                            burn_in=s.burn_in, thin=s.thin,
                                            replicas=min(s.replicas, count))
    cols = ["replica", "sweep"] + [f"S{i}" for i in range(cfg.N)]
    rows = [{"replica": r, "sweep": k, **{f"S{i}": v for i, v in enumerate(row)}}
            for r, k, row in zip(chain.replica, chain.sweep_index, chain.S)]
    path = write_csv(Path(out_dir) / "spins.csv", cols, rows)
    return {"path": str(path), "count": count, "n": sp.n, "beta": cfg.beta,
            "max_drift": chain.max_drift, "passed": True}


def limit_sample(cfg: ExperimentConfig, seed, out_dir) -> dict:
    lm = cfg.limit
    if lm.law == "quartic":
        Y = sample_quartic(QuarticLaw(cfg.N), lm.count, seed=seed)
    else:
        Y = sample_gauss(cfg.N, lm.count, seed=seed)
    cols = [f"y{i}" for i in range(cfg.N)]
    path = write_csv(Path(out_dir) / f"limit_{lm.law}.csv", cols,
                     [dict(zip(cols, row)) for row in Y])
    return {"path": str(path), "law": lm.law, "count": lm.count, "passed": True}


def read_points(path) -> np.ndarray:
    try:
        with open(path) as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        return np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: non-numeric entry ({exc})") from None


def wasserstein_stage(cfg: ExperimentConfig, seed, out_dir) -> dict:
    w = cfg.wasserstein
    if not w.a or not w.b:
        raise ConfigError("wasserstein needs input files 'a' and 'b'")
    a, b = read_points(w.a), read_points(w.b)
    method = cfg.transport.method
    if method == "none":
        raise ConfigError("transport.method 'none' is not valid for the wasserstein subcommand")
    try:
        if method == "exact":
            r = transport.w1_exact(a, b, on_mismatch=w.on_mismatch, seed=seed)
        else:
            r = transport.w1_sliced(a, b, seed=seed)
    except (DomainError, SizeMismatchError, InstanceTooLargeError) as exc:
        raise ConfigError(str(exc)) from None
    out = {"cost": r.cost, "method": r.method, "certificate_residual": r.certificate_residual,
           "m_a": len(a), "m_b": len(b), "passed": True}
    write_json(Path(out_dir) / "wasserstein.json", out)
    return out
