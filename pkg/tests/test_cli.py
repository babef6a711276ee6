import csv
import json
import math

import numpy as np
import pytest

from critical_on import cli, plotting
from critical_on import runner as R
from critical_on.errors import ConfigError

TINY = {
    "experiment": "tiny", "seed": 5,
    "model": {"N": 2, "n_grid": [16, 32]},
    "sampler": {"burn_in": 20, "thin": 2, "replicas": 3, "samples": 600},
    "transport": {"method": "exact", "exact_m": 40},
    "specfun": {"N_values": [2, 3], "points": 12},
    "pair": {"n_grid": [16, 32], "samples_per_replica": 10, "replicas": 2, "burn_in": 20, "thin": 2},
    "langevin": {"t": 0.4, "dt": 0.005, "replicas": 20, "checks": ["bel", "decay"],
                 "ergodic_samples": 50},
}


def _cfg(**over):
    return R.ExperimentConfig.from_dict(TINY).with_overrides(**over) if over else R.ExperimentConfig.from_dict(TINY)


def test_defaults_and_accessors():
    cfg = R.ExperimentConfig.from_dict({})
    assert cfg.N == 2 and cfg.beta == 2.0
    assert cfg.model.n_grid == [16, 32, 64, 128, 256, 512, 1024]
    assert cfg.sampler.samples == 100000
    assert cfg.x0 == [2.0, 0.0]
    assert cfg.sub_N == 2


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"model": {"N": 2, "extra": 0}},
    {"sampler": {"thin": 0}},
    {"model": {"N": 1}},
    {"transport": {"method": "greedy"}},
    {"langevin": {"checks": ["nope"]}},
])
def test_schema_rejects(raw):
    with pytest.raises(ConfigError):
        R.ExperimentConfig.from_dict(raw)


@pytest.mark.parametrize("raw, msg", [
    ({"model": {"N": 2, "beta": 2.5}}, "beta"),
    ({"model": {"n_grid": [32, 16]}}, "increasing"),
    ({"subcritical": {"beta": 2.0}}, "subcritical"),
    ({"langevin": {"x0": [1.0]}}, "x0"),
    ({"langevin": {"t": 1.0, "dt": 0.3}}, "multiple"),
    ({"sampler": {"replicas": 10, "samples": 5}}, "samples"),
])
def test_semantic_checks(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        R.ExperimentConfig.from_dict(raw)


def test_overrides_revalidate():
    cfg = _cfg()
    assert cfg.with_overrides(**{"model.N": 3}).x0 == [2.0, 0.0, 0.0]
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"model.beta": 9.0})


def test_load_config_accepts_manifest(tmp_path):
    man = R.new_manifest(_cfg())
    man.write(tmp_path)
    again = R.load_config(tmp_path / "manifest.json")
    assert again.to_dict() == _cfg().to_dict()
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        R.load_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        R.load_config(tmp_path / "missing.json")


def test_derived_seeds():
    assert R.derive_seed(1, 2, 3) == R.derive_seed(1, 2, 3)
    seeds = {R.stage_seed(7, s) for s in R.STAGES}
    assert len(seeds) == len(R.STAGES)
    assert R.derive_seed(1, 0) != R.derive_seed(2, 0)
    assert all(0 <= s < 2 ** 63 for s in seeds)


def test_fit_pooled_rate_exact_power_law():
    n = [16, 64, 256]
    vals = [3.0 * k ** -0.5 for k in n]
    loo = np.array([[v * (1 + 0.01 * r) for r in range(4)] for v in vals])
    est = R.fit_pooled_rate(n, vals, loo)
    assert est.fitted_slope == pytest.approx(-0.5, abs=1e-12)
    # a common multiplicative shift leaves every delete-one slope unchanged
    assert est.slope_se == pytest.approx(0.0, abs=1e-12)
    single = R.fit_pooled_rate([16], vals[:1], loo[:1])
    assert single.fitted_slope is None and single.slope_ci is None


def test_jackknife_se_of_a_mean_is_the_usual_se(rng):
    x = rng.standard_normal(30)
    loo = [(x.sum() - v) / 29 for v in x]
    assert R._jackknife_se(loo) == pytest.approx(x.std(ddof=1) / math.sqrt(30), rel=1e-12)


def test_monotone_within():
    assert R.monotone_within([3.0, 2.0, 1.0], [0.1] * 3)
    assert R.monotone_within([1.0, 1.2], [0.1, 0.1])
    assert not R.monotone_within([1.0, 1.3], [0.1, 0.1])


def test_csv_format_round_trips(tmp_path):
    p = R.write_csv(tmp_path / "x.csv", ["a", "b", "c"],
                    [{"a": 1, "b": 0.1 + 0.2, "c": None}, {"a": 2, "b": True, "c": "z"}])
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["a", "b", "c"]
    assert float(rows[1][1]) == 0.1 + 0.2 and rows[1][2] == ""
    assert rows[2] == ["2", "true", "z"]


def test_critical_sweep_requires_beta_equal_n():
    with pytest.raises(ConfigError):
        R.rate_sweep_critical(_cfg(**{"model.beta": 1.0}))
    with pytest.raises(ConfigError):
        R.rate_sweep_subcritical(_cfg(), beta=2.0)


def test_single_point_grid_gives_null_slope_and_csv(tmp_path):
    res = R.rate_sweep_critical(_cfg(**{"model.n_grid": [16]}), out_dir=tmp_path)
    assert res.estimate.fitted_slope is None
    rows = list(csv.DictReader(open(res.csv_path)))
    assert len(rows) == 1 and rows[0]["n"] == "16"
    assert json.load(open(tmp_path / "rate_critical.json"))["rate"]["fitted_slope"] is None
    assert (tmp_path / "figures" / "rate_critical.png").exists()


def test_sweep_rows_and_leave_one_out():
    res = R.rate_sweep_critical(_cfg())
    assert [r["n"] for r in res.rows] == [16, 32]
    for r in res.rows:
        assert r["metric"] > 0 and r["se"] > 0 and r["full_dim"] > 0
        assert r["max_drift"] < 1e-10
    assert res.floor > 0 and res.floor_sd >= 0


def test_uncoupled_spins_have_identity_covariance():
    # beta = 0: one heat-bath sweep redraws every spin uniformly, so the rows are iid
    cfg = _cfg(**{"model.n_grid": [64], "sampler.samples": 4000, "sampler.replicas": 4,
                  "sampler.burn_in": 1, "sampler.thin": 1})
    N, n = 2, 64
    from critical_on import spin_model
    chain = spin_model.sample_magnetization(N, n, 0.0, 4000, seed=3, burn_in=1, thin=1, replicas=4)
    W = math.sqrt(N) * chain.S / math.sqrt(n)
    for i in range(N):
        for j in range(N):
            prod = W[:, i] * W[:, j]
            se = prod.std(ddof=1) / math.sqrt(len(prod))
            assert abs(prod.mean() - (i == j)) <= 4 * se
    res = R.rate_sweep_subcritical(cfg, beta=0.0)
    assert res.rows[0]["cov_max_dev"] < 0.1


def test_parallel_cells_match_serial(monkeypatch):
    cfg = _cfg()
    serial = R.rate_sweep_critical(cfg).rows
    monkeypatch.setenv(R.THREADS_ENV, "2")
    parallel = R.rate_sweep_critical(cfg).rows
    assert serial == parallel


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv(R.THREADS_ENV, raising=False)
    assert R.worker_count() == 1
    monkeypatch.setenv(R.THREADS_ENV, "0")
    with pytest.raises(ConfigError):
        R.worker_count()


def test_png_bytes_are_deterministic(tmp_path):
    a = plotting.rate_figure(tmp_path / "a.png", [16, 32, 64], [0.1, 0.07, 0.05], [0.01] * 3, -0.5, 0.01)
    b = plotting.rate_figure(tmp_path / "b.png", [16, 32, 64], [0.1, 0.07, 0.05], [0.01] * 3, -0.5, 0.01)
    assert a.read_bytes() == b.read_bytes()


def test_full_report_is_reproducible(tmp_path):
    cfg = _cfg()
    m1 = R.full_report(cfg, tmp_path / "one", log=lambda s: None)
    m2 = R.full_report(cfg, tmp_path / "two", log=lambda s: None)
    assert m1.outputs == m2.outputs
    csvs = [k for k in m1.outputs if k.endswith(".csv")]
    assert {"specfun_table.csv", "pair_replicas.csv", "rate_critical.csv", "rate_subcritical.csv",
            "summary.csv"} <= set(csvs)
    assert any(k.startswith("figures/") for k in m1.outputs)
    man = json.load(open(tmp_path / "one" / "manifest.json"))
    assert set(man["stages"]) == {"specfun", "pair", "constants", "langevin", "critical", "subcritical"}
    for st in man["stages"].values():
        assert st["wall_clock_s"] >= 0 and isinstance(st["seed"], int)
    assert man["config"] == cfg.to_dict()
    assert man["artifact_version"]
    for name, digest in man["outputs"].items():
        assert R.sha256_file(tmp_path / "one" / name) == digest


def test_stage_failures_are_aggregated(tmp_path):
    cfg = _cfg(**{"constants.B": 0.0})
    man = R.full_report(cfg, tmp_path, log=lambda s: None)
    assert not man.passed
    assert not man.stages["constants"].passed
    assert "B > 0" in man.stages["langevin"].error
    assert man.stages["specfun"].passed


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def test_cli_constants_emits_json(tmp_path, capsys):
    code = cli.run(["constants", "--model", "quartic", "--N", "2", "--B", "1", "--out", str(tmp_path)])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["constants"]["C1"]["value"] == pytest.approx(1.0000219727326463, rel=1e-12)
    assert (tmp_path / "constants.json").exists()


def test_cli_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"N": 2, "beta": 3.0}}))
    assert cli.run(["rate-sweep", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"unknown": True}))
    assert cli.run(["full-report", "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as ei:
        cli.run(["langevin", "--check", "nonsense"])
    assert ei.value.code == 2
    assert not list(tmp_path.glob("rate_*"))


def test_cli_thread_env_validated(monkeypatch, capsys):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.run(["constants"]) == 2


def test_cli_assertion_failure_exits_1(tmp_path, capsys):
    assert cli.run(["constants", "--B", "0", "--out", str(tmp_path)]) == 1


def test_cli_sampling_and_wasserstein(tmp_path, tiny_config, capsys):
    out = str(tmp_path)
    assert cli.run(["limit-sample", "--config", str(tiny_config), "--count", "7", "--out", out]) == 0
    assert cli.run(["limit-sample", "--config", str(tiny_config), "--law", "gauss", "--count", "7",
                    "--out", out]) == 0
    rows = list(csv.reader(open(tmp_path / "limit_quartic.csv")))
    assert rows[0] == ["y0", "y1"] and len(rows) == 8
    assert cli.run(["wasserstein", "--config", str(tiny_config), "--a", str(tmp_path / "limit_quartic.csv"),
                    "--b", str(tmp_path / "limit_gauss.csv"), "--out", out]) == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert res["cost"] > 0 and res["method"] == "exact_matching"
    assert cli.run(["sample-spins", "--config", str(tiny_config), "--n", "8", "--count", "5",
                    "--out", out]) == 0
    rows = list(csv.reader(open(tmp_path / "spins.csv")))
    assert rows[0] == ["replica", "sweep", "S0", "S1"] and len(rows) == 6
    # wasserstein without inputs is a configuration error
    assert cli.run(["wasserstein", "--config", str(tiny_config), "--out", out]) == 2


def test_cli_rate_sweep_regimes(tmp_path, tiny_config, capsys):
    cli.run(["rate-sweep", "--config", str(tiny_config), "--out", str(tmp_path)])
    crit = json.loads(capsys.readouterr().out)
    assert crit["regime"] == "critical" and "fitted_slope" in crit["rate"]
    cli.run(["rate-sweep", "--config", str(tiny_config), "--beta", "1", "--out", str(tmp_path)])
    sub = json.loads(capsys.readouterr().out)
    assert sub["regime"] == "subcritical"
    assert (tmp_path / "rate_subcritical.csv").exists()


def test_cli_langevin_single_check(tmp_path, tiny_config, capsys):
    code = cli.run(["langevin", "--config", str(tiny_config), "--check", "bel", "--x0", "0.7,0.2",
                    "--t", "0.4", "--dt", "0.005", "--replicas", "50", "--out", str(tmp_path)])
    res = json.loads(capsys.readouterr().out)
    assert code == (0 if res["passed"] else 1)
    assert set(res) >= {"bel", "constants", "passed"} and "decay" not in res
    assert res["x0"] == [0.7, 0.2]


def test_cli_specfun_and_pair(tmp_path, tiny_config, capsys):
    assert cli.run(["specfun-table", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "specfun_table.csv")))
    assert len(rows) == 24 and set(rows[0]) == {"N", "x", "f", "g", "identity_residual", "taylor_residual"}
    cli.run(["pair-diagnostics", "--config", str(tiny_config), "--out", str(tmp_path)])
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert res["max_mean_residual"] <= 1e-10 and res["gradient_identity_exact"]
