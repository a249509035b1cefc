import json
import math

import numpy as np
import pytest

import perfinf.experiments as ex
from perfinf import cli
from perfinf.experiments import ConfigError, ExperimentConfig, qq_data, run_coverage_optimal, run_coverage_stable


def tiny_stable(**kw):
    cfg = ExperimentConfig(kind="coverage", target="stable", reps=kw.pop("reps", 4), seed=kw.pop("seed", 5))
    cfg.stable.eps_grid = kw.pop("eps_grid", [0.2])
    cfg.stable.T, cfg.stable.N, cfg.stable.n_mc, cfg.stable.qq_t = 3, 200, 200, 2
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def tiny_optimal(**kw):
    cfg = ExperimentConfig(kind="coverage", target="optimal", reps=kw.pop("reps", 3), seed=kw.pop("seed", 5))
    o = cfg.optimal
    o.misspec_grid, o.N, o.N_tilde, o.n_is, o.inner_M = [0.0], 90, 900, 2000, 5
    for k, v in kw.items():
        setattr(o, k, v)
    return cfg


# ---------------------------------------------------------------- config

def test_config_json_roundtrip(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"reps": 7, "stable": {"N": 300, "eps_grid": [0.1]}, "optimal": {"regressor": {"degree": 2}}}))
    cfg = ExperimentConfig.from_json(p)
    assert cfg.reps == 7 and cfg.stable.N == 300 and cfg.stable.eps_grid == [0.1] and cfg.optimal.degree == 2
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="stable.bogus"):
        ExperimentConfig.from_dict({"stable": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown config key"):
        ExperimentConfig.from_dict({"nope": 1})
    missing = tmp_path / "absent.json"
    with pytest.raises(ConfigError, match="absent.json"):
        ExperimentConfig.from_json(missing)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.from_json(bad)


@pytest.mark.parametrize("field,value", [("reps", 0), ("level", 1.0), ("seed", -1), ("kind", "plot"),
                                         ("target", "both"), ("workers", 0)])
def test_config_validation(field, value):
    cfg = ExperimentConfig()
    setattr(cfg, field, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_validation_sections():
    cfg = ExperimentConfig()
    cfg.stable.eps_grid = [1.0]
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.stable.qq_t = 11
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.optimal.n_is = 2.5
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_env_seed(monkeypatch):
    monkeypatch.setenv(ex.SEED_ENV, "42")
    assert ExperimentConfig().with_env().seed == 42
    monkeypatch.setenv(ex.SEED_ENV, "x")
    with pytest.raises(ConfigError):
        ExperimentConfig().with_env()


def test_profiles():
    desk = ExperimentConfig.desk()
    assert desk.reps == 200 and desk.stable.N == 2000 and desk.optimal.N == 3000
    ps = ExperimentConfig.paper_scale(target="stable")
    assert ps.reps == 1000 and ps.stable.N == 5000 and ps.stable.n_mc == 100_000
    po = ExperimentConfig.paper_scale(target="optimal")
    assert po.reps == 500 and po.optimal.N == 15_000 and po.optimal.N_tilde == 1_000_000
    assert po.optimal.n_is == 1_000_000


# ---------------------------------------------------------------- Q-Q

def test_qq_synthetic_normal():
    gen = np.random.default_rng(0)
    sig, N, K = np.array([[0.3, 0.1], [0.1, 0.2]]), 400, 1000
    truth = np.array([1.0, -1.0])
    est = gen.multivariate_normal(truth, sig / N, K)
    qq = qq_data(est, [sig] * K, [truth] * K, N)
    assert qq.skipped == 0 and qq.dim == 2 and len(qq.pairs) == K
    assert qq.correlation > 0.99
    assert np.all(np.diff(qq.empirical) >= 0)


def test_qq_identical_and_singular():
    truth = np.array([0.5, 0.5])
    qq = qq_data([truth] * 10, [np.eye(2)] * 10, [truth] * 10, 100)
    assert np.array_equal(qq.empirical, np.zeros(10)) and math.isnan(qq.correlation)
    covs = [np.eye(2)] * 11 + [np.zeros((2, 2))]
    gen = np.random.default_rng(1)
    qq = qq_data(gen.normal(size=(12, 2)), covs, [np.zeros(2)] * 12, 1)
    assert qq.skipped == 1 and len(qq.empirical) == 11


def test_qq_errors():
    with pytest.raises(ValueError):
        qq_data([np.zeros(2)] * 9, [np.eye(2)] * 9, [np.zeros(2)] * 9, 1)
    with pytest.raises(ValueError):
        qq_data([np.zeros(2)] * 10, [np.eye(2)] * 9, [np.zeros(2)] * 10, 1)


# ---------------------------------------------------------------- stable coverage

def test_stable_report_structure():
    rep = run_coverage_stable(tiny_stable())
    assert len(rep.rows) == 3 * 2 and len(rep.records) == 4 * 3 * 2
    for row in rep.rows:
        assert 0.0 <= row["coverage"] <= 1.0 and row["reps"] == 4 and not row["degenerate"]
        assert row["coverage_se"] == pytest.approx(math.sqrt(row["coverage"] * (1 - row["coverage"]) / 4))
    assert rep.failures == {"0.2": 0}


def test_stable_single_rep_degenerate():
    rep = run_coverage_stable(tiny_stable(reps=1))
    for row in rep.rows:
        assert row["coverage"] in (0.0, 1.0) and row["coverage_se"] == 0.0 and row["degenerate"]


def test_stable_workers_deterministic():
    a = run_coverage_stable(tiny_stable(reps=6, workers=1, eps_grid=[0.05, 0.2]))
    b = run_coverage_stable(tiny_stable(reps=6, workers=2, eps_grid=[0.05, 0.2]))
    assert a.rows == b.rows and a.records == b.records


def test_stable_failure_isolated(monkeypatch):
    real = ex.err_run

    def flaky(game, dmap, theta0, T, N, rng, **kw):
        if rng.key[-1] == 2:
            raise FloatingPointError("injected")
        return real(game, dmap, theta0, T, N, rng, **kw)

    monkeypatch.setattr(ex, "err_run", flaky)
    rep = run_coverage_stable(tiny_stable(reps=5))
    assert rep.failures == {"0.2": 1}
    assert all(row["reps"] == 4 and row["failures"] == 1 for row in rep.rows)
    bad = [r for r in rep.replications if not r["ok"]]
    assert len(bad) == 1 and "injected" in bad[0]["error"]


def test_stable_qq_from_report():
    rep = run_coverage_stable(tiny_stable(reps=12))
    qq = ex.stable_qq(rep)
    assert list(qq) == [0.2] and qq[0.2].dim == 2 and len(qq[0.2].empirical) == 12


# ---------------------------------------------------------------- optimal coverage

def test_optimal_report_structure():
    rep = run_coverage_optimal(tiny_optimal())
    assert {r["method"] for r in rep.rows} == {"erm", "recal"}
    for row in rep.rows:
        assert row["reps"] == 3 and row["failures"] == 0 and row["mean_width"] > 0
    assert len(rep.records) == 6
    assert all(r["ci_lo"] < r["theta_hat"] < r["ci_hi"] for r in rep.records)


def test_optimal_vanishing_noise_is_flagged():
    # the atlas density collapses onto a point, so no fixed proposal carries usable weight
    rep = run_coverage_optimal(tiny_optimal(sigma=1e-9))
    for row in rep.rows:
        assert row["reps"] == 0 and row["failures"] == 3 and row["degenerate"]
    errs = [m["error"] for r in rep.replications for m in r["methods"].values()]
    assert errs and all("ProposalError" in e for e in errs)


def test_optimal_recal_width_scales_with_noise():
    widths = {}
    for sigma in (0.5, 0.25):
        rep = run_coverage_optimal(tiny_optimal(sigma=sigma, N=600, N_tilde=20_000, n_is=20_000, inner_M=20,
                                                finite_mc=False))
        widths[sigma] = {r["method"]: r["mean_width"] for r in rep.rows}
    assert widths[0.25]["recal"] / widths[0.5]["recal"] == pytest.approx(0.5, rel=0.2)
    assert widths[0.25]["erm"] / widths[0.5]["erm"] > 0.75


# ---------------------------------------------------------------- writers

def test_writers(tmp_path):
    rep = run_coverage_stable(tiny_stable())
    paths = ex.write_stable_outputs(rep, tmp_path, trajectories=True)
    names = sorted(p.name for p in paths)
    assert "trajectory_eps0.2.csv" in names
    head = (tmp_path / "trajectory_eps0.2.csv").read_text().splitlines()
    assert head[0] == ",".join(ex.TRAJECTORY_COLUMNS) and len(head) == 1 + 4 * 3 * 2
    summary = [p for p in paths if p.suffix == ".json"][0]
    assert json.loads(summary.read_text())["target"] == "stable"


# ---------------------------------------------------------------- CLI

STABLE_ARGS = ["--eps", "0.2", "--n", "200", "--T", "3", "--n-mc", "200", "--reps", "3", "--seed", "11"]


def _read_all(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_cli_deterministic(tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["stable-sim", "--out", str(out), *STABLE_ARGS]) == 0
    first = _read_all(out)
    assert cli.main(["stable-sim", "--out", str(out), *STABLE_ARGS]) == 0
    assert _read_all(out) == first and len(first) >= 2
    printed = capsys.readouterr().out.split()
    assert all(p.startswith(str(out)) for p in printed)


def test_cli_coverage_and_qq(tmp_path):
    assert cli.main(["coverage", "--target", "stable", "--out", str(tmp_path / "c"), *STABLE_ARGS]) == 0
    assert (tmp_path / "c" / "coverage_stable.csv").is_file()
    args = [a if a != "3" else "12" for a in STABLE_ARGS]
    assert cli.main(["qq", "--t", "2", "--out", str(tmp_path / "q"), *args]) == 0
    assert any(p.name.startswith("qq") for p in (tmp_path / "q").iterdir())


def test_cli_missing_config(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert cli.main(["coverage", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_unknown_flag(capsys):
    assert cli.main(["coverage", "--bogus"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_cli_truth(capsys):
    assert cli.main(["truth", "--eps", "0.2", "--t", "3", "--theta0", "1", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert np.allclose(out["theta_t"], [0.008, 0.016])
    assert cli.main(["truth", "--family", "location"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["theta_po"] == pytest.approx(2.0) and out["jacobian"] == pytest.approx(4.0)


def test_cli_truth_bad_eps(capsys):
    assert cli.main(["truth", "--eps", "1.5"]) == 2


def test_cli_runtime_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["stable-sim", "--out", str(blocker), *STABLE_ARGS]) == 3
    assert "runtime error" in capsys.readouterr().err


def test_cli_bad_config_value(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"reps": 0}))
    assert cli.main(["coverage", "--config", str(p)]) == 2
