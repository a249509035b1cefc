"""Replicated simulation studies: coverage, interval widths and Mahalanobis Q-Q data.

Every replication owns the substream ``(seed, study, grid index, rep)``, so
results do not depend on the number of worker processes.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .distributions import make_gaussian_atlas, make_gaussian_location, make_linear_atlas, make_location_family
from .optimal import RegressorSpec, draw_paired_data, plugin_inference, uniform_design
from .oracle import gaussian_stable_path, location_optimal_truth
from .rng import RngStream
from .solvers import SolveOptions, squared_loss_game
from .stable import err_run, stable_confidence_intervals

SEED_ENV = "PERF_INF_SEED"
STABLE_STUDY, OPTIMAL_STUDY = 0, 1


class ConfigError(ValueError):
    pass


@dataclass
class StableSettings:
    eps_grid: list = field(default_factory=lambda: [0.01, 0.05, 0.2])
    sigma_diag: list = field(default_factory=lambda: [0.25, 0.25])
    theta0: list = field(default_factory=lambda: [1.0, 2.0])
    T: int = 10
    N: int = 2000
    n_mc: int = 10_000
    qq_t: int = 5


@dataclass
class OptimalSettings:
    b: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.3
    sigma: float = 0.5
    misspec_grid: list = field(default_factory=lambda: [0.0, 0.25, 0.5])
    N: int = 3000
    N_tilde: int = 50_000
    n_is: int = 100_000
    inner_M: int = 100
    degree: int = 3
    design_low: float = -1.0
    design_high: float = 1.0
    finite_mc: bool = True


@dataclass
class SolverSettings:
    tol: float = 1e-8
    max_inner: int = 10_000
    max_sweeps: int = 500

    def options(self) -> SolveOptions:
        return SolveOptions(tol=self.tol, max_inner=self.max_inner, max_sweeps=self.max_sweeps)


@dataclass
class ExperimentConfig:
    kind: str = "coverage"
    target: str = "stable"
    reps: int = 200
    level: float = 0.95
    seed: int = 0
    workers: int = 1
    out_dir: str | None = None
    stable: StableSettings = field(default_factory=StableSettings)
    optimal: OptimalSettings = field(default_factory=OptimalSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)

    def validate(self) -> "ExperimentConfig":
        if self.kind not in ("stable-sim", "optimal-sim", "coverage", "qq"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.target not in ("stable", "optimal"):
            raise ConfigError(f"unknown coverage target {self.target!r}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        counts = {"reps": self.reps, "workers": self.workers, "stable.T": self.stable.T, "stable.N": self.stable.N,
                  "stable.n_mc": self.stable.n_mc, "optimal.N": self.optimal.N,
                  "optimal.N_tilde": self.optimal.N_tilde, "optimal.n_is": self.optimal.n_is,
                  "optimal.inner_M": self.optimal.inner_M}
        for k, v in counts.items():
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if not self.stable.eps_grid or not self.optimal.misspec_grid:
            raise ConfigError("grids must be non-empty")
        if any(not 0.0 <= e < 1.0 for e in self.stable.eps_grid):
            raise ConfigError("stable.eps_grid entries must lie in [0, 1)")
        if self.stable.N < 2:
            raise ConfigError("stable.N must be at least 2")
        if len(self.stable.sigma_diag) != len(self.stable.theta0):
            raise ConfigError("stable.sigma_diag and stable.theta0 must have equal length")
        if not 1 <= self.stable.qq_t <= self.stable.T:
            raise ConfigError("stable.qq_t must lie in [1, T]")
        return self

    @classmethod
    def desk(cls, **kw) -> "ExperimentConfig":
        return cls(**kw)

    @classmethod
    def paper_scale(cls, **kw) -> "ExperimentConfig":
        cfg = cls(**kw)
        cfg.stable = replace(cfg.stable, N=5000, n_mc=100_000)
        cfg.optimal = replace(cfg.optimal, N=15_000, N_tilde=1_000_000, n_is=1_000_000)
        cfg.reps = 1000 if cfg.target == "stable" else 500
        return cfg

    @classmethod
    def from_dict(cls, d: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = base or cls()
        sections = {"stable": StableSettings, "optimal": OptimalSettings, "solver": SolverSettings}
        top = {f.name for f in fields(cls)} - set(sections)
        for key, val in d.items():
            if key in sections:
                if not isinstance(val, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                sub = getattr(cfg, key)
                names = {f.name for f in fields(sections[key])}
                for k2, v2 in val.items():
                    if k2 == "regressor" and key == "optimal" and isinstance(v2, dict):
                        if "degree" in v2:
                            sub = replace(sub, degree=int(v2["degree"]))
                        continue
                    if k2 not in names:
                        raise ConfigError(f"unknown config key {key}.{k2}")
                    sub = replace(sub, **{k2: v2})
                setattr(cfg, key, sub)
            elif key in top:
                setattr(cfg, key, val)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cfg

    @classmethod
    def from_json(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {p} must contain a JSON object")
        return cls.from_dict(data, base)

    def with_env(self) -> "ExperimentConfig":
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                self.seed = int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- replication bodies


def _stable_rep(args):
    cfg, gi, rep = args
    s = cfg.stable
    eps = float(s.eps_grid[gi])
    d = len(s.theta0)
    dmap = make_gaussian_location(eps, s.sigma_diag)
    game = squared_loss_game((d,))
    atlas = make_gaussian_atlas(s.sigma_diag)
    rng = RngStream(cfg.seed, (STABLE_STUDY, gi, rep))
    try:
        traj = err_run(game, dmap, s.theta0, s.T, s.N, rng, atlas=atlas, n_mc=s.n_mc,
                       opts=cfg.solver.options(), keep_samples=False)
        rep_ci = stable_confidence_intervals(traj, cfg.level)
    except Exception as exc:  # isolate the failure; counted in aggregates
        return {"grid": gi, "rep": rep, "ok": False, "error": f"{type(exc).__name__}: {exc}"}
    return {"grid": gi, "rep": rep, "ok": True, "estimates": traj.estimates, "covariances": traj.covariances,
            "lower": rep_ci.lower, "upper": rep_ci.upper}


def _optimal_rep(args):
    cfg, gi, rep = args
    o = cfg.optimal
    eps_mis = float(o.misspec_grid[gi])
    dmap = make_location_family(o.b, o.beta1, o.beta2, eps_mis, o.sigma)
    atlas = make_linear_atlas(o.sigma, b=o.b)
    game = squared_loss_game((1,), weight=1.0)
    design = uniform_design(o.design_low, o.design_high)
    rng = RngStream(cfg.seed, (OPTIMAL_STUDY, gi, rep))
    out = {"grid": gi, "rep": rep, "methods": {}}
    try:
        data = draw_paired_data(dmap, design, o.N, rng.child(0))
    except Exception as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
        return out
    for method in ("erm", "recal"):
        try:
            res = plugin_inference(data, atlas, game, dmap, method="recalibrated" if method == "recal" else "erm",
                                   n_tilde=o.N_tilde, n_is=o.n_is, inner_m=o.inner_M,
                                   regressor=RegressorSpec(degree=o.degree), rng=rng.child(1),
                                   level=cfg.level, opts=cfg.solver.options(), finite_mc=o.finite_mc)
        except Exception as exc:
            out["methods"][method] = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
            continue
        out["methods"][method] = {"ok": True, "beta": float(res.beta[0]), "theta": float(res.theta[0]),
                                  "lo": float(res.lower[0]), "hi": float(res.upper[0]),
                                  "sigma_beta": float(res.sigma_beta[0, 0])}
    return out


def _run_all(fn, cfg: ExperimentConfig, n_grid: int) -> list:
    tasks = [(cfg, gi, rep) for gi in range(n_grid) for rep in range(cfg.reps)]
    if cfg.workers <= 1:
        results = [fn(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (8 * cfg.workers))))
    return sorted(results, key=lambda r: (r["grid"], r["rep"]))


# --------------------------------------------------------------------------- reports


def coverage_se(p: float, reps: int) -> float:
    return math.sqrt(p * (1.0 - p) / reps) if reps > 0 else math.nan


@dataclass
class CoverageReport:
    target: str
    rows: list[dict]          # aggregated, one per (grid point, t or method, coordinate)
    records: list[dict]       # long-form, one per (grid point, rep, ...)
    failures: dict
    config: dict
    replications: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"target": self.target, "rows": self.rows, "failures": self.failures}


def run_coverage_stable(config: ExperimentConfig) -> CoverageReport:
    cfg = config.validate()
    s = cfg.stable
    results = _run_all(_stable_rep, cfg, len(s.eps_grid))
    rows, records, failures = [], [], {}
    for gi, eps in enumerate(s.eps_grid):
        truths = gaussian_stable_path(eps, s.sigma_diag, s.theta0, s.T)
        theta_t = np.array([tr.theta_t for tr in truths])
        ok = [r for r in results if r["grid"] == gi and r["ok"]]
        failures[str(eps)] = sum(1 for r in results if r["grid"] == gi and not r["ok"])
        n_ok = len(ok)
        for r in ok:
            cov_t = (r["lower"] <= theta_t) & (theta_t <= r["upper"])
            cov_ps = (r["lower"] <= 0.0) & (0.0 <= r["upper"])
            for t in range(s.T):
                for c in range(len(s.theta0)):
                    records.append({"eps": eps, "rep": r["rep"], "t": t + 1, "coord": c,
                                    "estimate": r["estimates"][t, c], "var_estimate": r["covariances"][t, c, c],
                                    "ci_lo": r["lower"][t, c], "ci_hi": r["upper"][t, c],
                                    "truth": theta_t[t, c], "covered": int(cov_t[t, c]),
                                    "covered_ps": int(cov_ps[t, c])})
        for t in range(s.T):
            for c in range(len(s.theta0)):
                if n_ok:
                    lo = np.array([r["lower"][t, c] for r in ok])
                    hi = np.array([r["upper"][t, c] for r in ok])
                    p = float(np.mean((lo <= theta_t[t, c]) & (theta_t[t, c] <= hi)))
                    q = float(np.mean((lo <= 0.0) & (0.0 <= hi)))
                    w = float(np.mean(hi - lo))
                else:
                    p = q = w = math.nan
                rows.append({"eps": eps, "t": t + 1, "coord": c, "coverage": p, "coverage_se": coverage_se(p, n_ok),
                             "coverage_ps": q, "coverage_ps_se": coverage_se(q, n_ok), "mean_width": w,
                             "reps": n_ok, "failures": failures[str(eps)], "degenerate": n_ok <= 1})
    return CoverageReport("stable", rows, records, failures, cfg.to_dict(), results)


def _var_se(x: np.ndarray) -> tuple[float, float]:
    n = x.shape[0]
    if n < 2:
        return math.nan, math.nan
    v = float(np.var(x, ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    return v, math.sqrt(max(m4 - v * v, 0.0) / n)


def run_coverage_optimal(config: ExperimentConfig) -> CoverageReport:
    cfg = config.validate()
    o = cfg.optimal
    results = _run_all(_optimal_rep, cfg, len(o.misspec_grid))
    z = float(stats.norm.ppf(0.5 + cfg.level / 2.0))
    rows, records, failures = [], [], {}
    for gi, eps_mis in enumerate(o.misspec_grid):
        truth = location_optimal_truth(o.b, o.beta1, o.sigma, o.beta2, eps_mis)
        for method in ("erm", "recal"):
            ok, n_fail = [], 0
            for r in results:
                if r["grid"] != gi:
                    continue
                m = r["methods"].get(method)
                if m is None or not m["ok"]:
                    n_fail += 1
                    continue
                covered = int(m["lo"] <= truth.theta_po <= m["hi"])
                half_b = z * math.sqrt(max(m["sigma_beta"], 0.0) / o.N)
                b_cov = int(m["beta"] - half_b <= truth.beta_star <= m["beta"] + half_b)
                rec = {"rep": r["rep"], "method": method, "eps_mis": eps_mis, "beta_hat": m["beta"],
                       "theta_hat": m["theta"], "ci_lo": m["lo"], "ci_hi": m["hi"], "covered": covered,
                       "width": m["hi"] - m["lo"], "beta_var_estimate": m["sigma_beta"], "beta_covered": b_cov}
                records.append(rec)
                ok.append(rec)
            failures[f"{eps_mis}/{method}"] = n_fail
            n_ok = len(ok)
            widths = np.array([r["width"] for r in ok])
            betas = np.array([r["beta_hat"] for r in ok])
            p = float(np.mean([r["covered"] for r in ok])) if n_ok else math.nan
            pb = float(np.mean([r["beta_covered"] for r in ok])) if n_ok else math.nan
            bv, bv_se = _var_se(betas)
            rows.append({"eps_mis": eps_mis, "method": method, "coverage": p, "coverage_se": coverage_se(p, n_ok),
                         "mean_width": float(widths.mean()) if n_ok else math.nan,
                         "width_se": float(widths.std(ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else math.nan,
                         "beta_coverage": pb, "beta_coverage_se": coverage_se(pb, n_ok),
                         "beta_var": bv, "beta_var_se": bv_se, "reps": n_ok, "failures": n_fail,
                         "degenerate": n_ok <= 1 or (n_ok > 1 and float(widths.max()) == 0.0)})
    return CoverageReport("optimal", rows, records, failures, cfg.to_dict(), results)


@dataclass
class QQData:
    empirical: np.ndarray
    chi2: np.ndarray
    skipped: int
    dim: int

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.empirical.tolist(), self.chi2.tolist()))

    @property
    def correlation(self) -> float:
        if self.empirical.size < 2 or np.ptp(self.empirical) == 0.0:
            return math.nan
        return float(np.corrcoef(self.empirical, self.chi2)[0, 1])


def qq_data(estimates, covariances, truths, N: int) -> QQData:
    """Sorted ``N (theta_hat - theta)^T Sigma_hat^-1 (theta_hat - theta)`` against chi-square quantiles."""
    est = [np.atleast_1d(np.asarray(e, dtype=float)) for e in estimates]
    covs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in covariances]
    tr = [np.atleast_1d(np.asarray(t, dtype=float)) for t in truths]
    if not (len(est) == len(covs) == len(tr)):
        raise ValueError("estimates, covariances and truths must have equal lengths")
    if len(est) < 10:
        raise ValueError("at least 10 replications are required")
    dists, skipped = [], 0
    for e, c, t in zip(est, covs, tr):
        try:
            if np.linalg.cond(c) > 1e12:
                raise np.linalg.LinAlgError
            dev = e - t
            dists.append(float(N * dev @ np.linalg.solve(c, dev)))
        except np.linalg.LinAlgError:
            skipped += 1
    dim = est[0].shape[0]
    k = len(dists)
    emp = np.sort(np.array(dists))
    chi = stats.chi2.ppf((np.arange(1, k + 1) - 0.5) / k, df=dim) if k else np.empty(0)
    return QQData(emp, chi, skipped, dim)


def stable_qq(report: CoverageReport, t: int | None = None) -> dict[float, QQData]:
    """Q-Q data per sensitivity at step ``t`` from a stable coverage run."""
    s = StableSettings(**report.config["stable"])
    t = t or s.qq_t
    out = {}
    for gi, eps in enumerate(s.eps_grid):
        truth = gaussian_stable_path(eps, s.sigma_diag, s.theta0, t)[-1].theta_t
        ok = [r for r in report.replications if r["grid"] == gi and r["ok"]]
        if len(ok) < 10:
            continue
        out[eps] = qq_data([r["estimates"][t - 1] for r in ok], [r["covariances"][t - 1] for r in ok],
                           [truth] * len(ok), s.N)
    return out


# --------------------------------------------------------------------------- output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if not math.isfinite(f) else f
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


TRAJECTORY_COLUMNS = ["rep", "t", "coord", "estimate", "var_estimate"]
STABLE_COVERAGE_COLUMNS = ["eps", "rep", "t", "coord", "estimate", "var_estimate", "ci_lo", "ci_hi", "truth",
                           "covered", "covered_ps"]
STABLE_SUMMARY_COLUMNS = ["eps", "t", "coord", "coverage", "coverage_se", "coverage_ps", "coverage_ps_se",
                          "mean_width", "reps", "failures", "degenerate"]
OPTIMAL_COLUMNS = ["rep", "method", "eps_mis", "beta_hat", "theta_hat", "ci_lo", "ci_hi", "covered", "width",
                   "beta_var_estimate", "beta_covered"]
OPTIMAL_SUMMARY_COLUMNS = ["eps_mis", "method", "coverage", "coverage_se", "mean_width", "width_se",
                           "beta_coverage", "beta_coverage_se", "beta_var", "beta_var_se", "reps", "failures",
                           "degenerate"]
QQ_COLUMNS = ["eps", "k", "empirical_q", "chi2_q"]


def write_stable_outputs(report: CoverageReport, out_dir, trajectories: bool = False) -> list[Path]:
    out = Path(out_dir)
    paths = []
    if trajectories:
        eps_grid = report.config["stable"]["eps_grid"]
        for eps in eps_grid:
            rows = [r for r in report.records if r["eps"] == eps]
            p = out / f"trajectory_eps{eps}.csv"
            write_csv(p, rows, TRAJECTORY_COLUMNS)
            paths.append(p)
    else:
        p = out / "coverage_stable.csv"
        write_csv(p, report.records, STABLE_COVERAGE_COLUMNS)
        paths.append(p)
    p = out / "summary_stable.csv"
    write_csv(p, report.rows, STABLE_SUMMARY_COLUMNS)
    paths.append(p)
    p = out / "summary_stable.json"
    write_json(p, {**report.summary(), "config": report.config})
    paths.append(p)
    return paths


def write_optimal_outputs(report: CoverageReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = [out / "optimal.csv", out / "summary_optimal.csv", out / "summary_optimal.json"]
    write_csv(paths[0], report.records, OPTIMAL_COLUMNS)
    write_csv(paths[1], report.rows, OPTIMAL_SUMMARY_COLUMNS)
    write_json(paths[2], {**report.summary(), "config": report.config})
    return paths


def write_qq_outputs(qq: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    rows = []
    for eps, q in qq.items():
        rows += [{"eps": eps, "k": k + 1, "empirical_q": e, "chi2_q": c}
                 for k, (e, c) in enumerate(zip(q.empirical, q.chi2))]
    paths = [out / "qq.csv", out / "summary_qq.json"]
    write_csv(paths[0], rows, QQ_COLUMNS)
    write_json(paths[1], {str(eps): {"correlation": q.correlation, "skipped": q.skipped, "K": int(q.empirical.size)}
                          for eps, q in qq.items()})
    return paths
