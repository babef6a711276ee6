"""Command-line entry point: ``critical-on <subcommand> [--config PATH] [--seed S] [--out DIR]``.

Exit codes: 0 all checks passed, 1 an assertion failed, 2 configuration error.
The only environment variable read is CRITICAL_ON_THREADS (worker count).
"""

import argparse
import json
import os
import sys

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
THREADS_ENV = "CRITICAL_ON_THREADS"

SUBCOMMANDS = ("specfun-table", "sample-spins", "limit-sample", "wasserstein", "pair-diagnostics",
               "constants", "langevin", "rate-sweep", "full-report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="critical-on", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (or a previous manifest.json)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides the config")
    common.add_argument("--N", type=int, dest="N", help="spin dimension / model dimension")
    cmds = {name: sub.add_parser(name, parents=[common]) for name in SUBCOMMANDS}
    for name in ("sample-spins", "rate-sweep", "pair-diagnostics"):
        cmds[name].add_argument("--beta", type=float)
    for name in ("sample-spins", "rate-sweep"):
        cmds[name].add_argument("--n-grid", type=_ints, dest="n_grid")
    cmds["sample-spins"].add_argument("--n", type=int, dest="n_sites")
    cmds["sample-spins"].add_argument("--count", type=int)
    cmds["rate-sweep"].add_argument("--samples", type=int)
    cmds["limit-sample"].add_argument("--law", choices=["quartic", "gauss"])
    cmds["limit-sample"].add_argument("--count", type=int)
    cmds["wasserstein"].add_argument("--a")
    cmds["wasserstein"].add_argument("--b")
    cmds["wasserstein"].add_argument("--method", choices=["exact", "sliced"])
    cmds["constants"].add_argument("--model", choices=["quartic", "quadratic"])
    cmds["constants"].add_argument("--B", type=float, dest="B")
    lg = cmds["langevin"]
    lg.add_argument("--model", choices=["quartic", "quadratic"])
    lg.add_argument("--x0", type=_floats)
    lg.add_argument("--t", type=float)
    lg.add_argument("--dt", type=float)
    lg.add_argument("--replicas", type=int)
    lg.add_argument("--check", choices=["variation", "decay", "bel", "stein", "ergodic"])
    return p


def _overrides(args) -> dict:
    table = {
        "seed": "seed", "out": "out", "N": "model.N", "beta": "model.beta", "n_grid": "model.n_grid",
        "n_sites": "spins.n", "samples": "sampler.samples", "law": "limit.law", "a": "wasserstein.a",
        "b": "wasserstein.b", "method": "transport.method", "B": "constants.B", "x0": "langevin.x0",
        "t": "langevin.t", "dt": "langevin.dt", "replicas": "langevin.replicas",
    }
    out = {key: getattr(args, attr) for attr, key in table.items() if getattr(args, attr, None) is not None}
    if getattr(args, "count", None) is not None:
        out["limit.count" if args.command == "limit-sample" else "spins.count"] = args.count
    if getattr(args, "model", None) is not None:
        out["constants.model" if args.command == "constants" else "langevin.model"] = args.model
    if getattr(args, "check", None) is not None:
        out["langevin.checks"] = [args.check]
    return out


def _apply_threads():
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return
    if not raw.isdigit() or int(raw) < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, raw)


def _emit(obj):
    from .runner import _jsonable
    print(json.dumps(_jsonable(obj), sort_keys=True))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads()
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    # heavy imports happen after the thread variables are in place
    from . import runner as R
    from .errors import ConfigError, CriticalOnError

    try:
        cfg = R.load_config(args.config) if args.config else R.ExperimentConfig.from_dict({})
        ov = _overrides(args)
        if ov:
            cfg = cfg.with_overrides(**ov)
        R.worker_count()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from pathlib import Path
    out = Path(cfg.out)
    cmd = args.command
    try:
        if cmd == "full-report":
            man = R.full_report(cfg, out)
            print(f"manifest,{out / 'manifest.json'}")
            print(f"overall,{'pass' if man.passed else 'FAIL'}")
            return EXIT_OK if man.passed else EXIT_FAIL
        if cmd == "specfun-table":
            res = R.stage_specfun(cfg, R.stage_seed(cfg.seed, "specfun"), out)
        elif cmd == "sample-spins":
            res = R.sample_spins(cfg, R.stage_seed(cfg.seed, "spins"), out)
        elif cmd == "limit-sample":
            res = R.limit_sample(cfg, R.stage_seed(cfg.seed, "limit"), out)
        elif cmd == "wasserstein":
            res = R.wasserstein_stage(cfg, R.stage_seed(cfg.seed, "wasserstein"), out)
        elif cmd == "pair-diagnostics":
            res = R.stage_pair(cfg, R.stage_seed(cfg.seed, "pair"), out)
        elif cmd == "constants":
            res = R.stage_constants(cfg, R.stage_seed(cfg.seed, "constants"), out)
        elif cmd == "langevin":
            res = R.langevin_checks(cfg, R.stage_seed(cfg.seed, "langevin"), out_dir=out)
        else:  # rate-sweep: the regime follows from beta
            kind = "critical" if cfg.beta == cfg.N else "subcritical"
            if kind == "subcritical":
                cfg = cfg.with_overrides(**{"subcritical.N": cfg.N, "subcritical.beta": cfg.beta})
            res = R.stage_rates(cfg, R.stage_seed(cfg.seed, kind), out, kind)
            res["regime"] = kind
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CriticalOnError, AssertionError, ArithmeticError) as exc:
        print(f"check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _emit(res)
    return EXIT_OK if res.get("passed", True) else EXIT_FAIL


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
