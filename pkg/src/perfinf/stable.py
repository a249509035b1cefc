"""Empirical repeated retraining and inference for its iterates.

Each step re-solves the empirical first-order condition on fresh samples
drawn under the previous iterate.  The covariance of ``sqrt(N)(theta_t -
theta_t*)`` is propagated by

    Sigma_t = V^-1 H V^-T + J Sigma_{t-1} J^T,

where the Jacobian of the solution map ``J = -V^-1 M`` is estimated with a
fitted atlas: ``M`` is the Monte Carlo cross-moment of the gradient and the
atlas theta-score under ``D_beta_hat(theta_{t-1})``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from ._linalg import is_psd, psd_repair, ridge_solve, symmetrize
from .distributions import Atlas, DistributionMap, SampleSet, as_atlases, as_flat, sample
from .optimal import PairedData, _split_beta, erm_beta
from .rng import RngStream, as_stream
from .solvers import GameSpec, SolveOptions, SolverError, solve_empirical_foc


@dataclass
class ErrTrajectory:
    estimates: np.ndarray              # (T, d)
    theta0: np.ndarray
    N: int
    samples: list[SampleSet] = field(default_factory=list)
    step_covariances: np.ndarray | None = None   # (T, d, d)
    covariances: np.ndarray | None = None        # accumulated, (T, d, d)
    jacobians: np.ndarray | None = None          # (T, d, d); entry 0 is unused and zero
    betas: list[np.ndarray] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.estimates.shape[0]

    @property
    def d(self) -> int:
        return self.estimates.shape[1]


def sandwich_step_covariance(game: GameSpec, samples: SampleSet, theta_hat, *, ridge: bool = True,
                             fd_fallback: bool = True, info: dict | None = None) -> np.ndarray:
    """``V^-1 H V^-T`` with ``V`` the mean gradient Jacobian and ``H`` the centered gradient outer product."""
    theta_hat = as_flat(theta_hat)
    g = game.gradient_rows(theta_hat, samples)
    gc = g - g.mean(axis=0)
    h = gc.T @ gc / g.shape[0]
    v = game.mean_jacobian(theta_hat, samples, fd_fallback=fd_fallback)
    left = ridge_solve(v, h, ridge=ridge, info=info)
    return psd_repair(ridge_solve(v, left.T, ridge=ridge, info=info), info)


def _atlas_draws(atlases, betas, theta_prev, n_mc, rng: RngStream):
    zs = [at.sample(theta_prev, b, n_mc, rng.child(i)).reshape(n_mc, at.z_dim)
          for i, (at, b) in enumerate(zip(atlases, betas))]
    score = sum(at.theta_score(theta_prev, z, b) for at, z, b in zip(atlases, zs, betas))
    return zs, np.asarray(score, dtype=float).reshape(n_mc, -1)


def estimate_sol_jacobian(atlas, beta_hat, theta_prev, theta_cur, game: GameSpec, n_mc: int = 10_000,
                          rng: RngStream | int | None = None, *, samples: SampleSet | None = None,
                          return_se: bool = False, info: dict | None = None):
    """``J = -V^-1 M`` with ``M = mean[G(theta_cur, Z_j) score(theta_prev, Z_j)^T]``, ``Z_j ~ D_beta_hat(theta_prev)``.

    ``V`` is the mean gradient Jacobian over ``samples`` when given, else over
    the Monte Carlo draws.  With ``return_se`` the entrywise Monte Carlo
    standard errors (for fixed ``V``) are returned as well.
    """
    if n_mc < 100:
        raise ValueError("n_mc must be at least 100")
    atlases = as_atlases(atlas)
    betas = _split_beta(beta_hat, atlases)
    theta_prev, theta_cur = as_flat(theta_prev), as_flat(theta_cur)
    zs, score = _atlas_draws(atlases, betas, theta_prev, int(n_mc), as_stream(rng))
    g = game.gradient_rows(theta_cur, zs)
    m_hat = g.T @ score / n_mc
    v = game.mean_jacobian(theta_cur, samples if samples is not None else zs)
    jac = -ridge_solve(v, m_hat, info=info)
    if not return_se:
        return jac
    vinv = ridge_solve(v, np.eye(v.shape[0]))
    contrib = -np.einsum("ab,nb,nc->nac", vinv, g, score)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(n_mc)
    return jac, se


def accumulate_covariance(step_cov, jac, prev_total) -> np.ndarray:
    """``step_cov + jac @ prev_total @ jac.T``, symmetrized."""
    s = np.atleast_2d(np.asarray(step_cov, dtype=float))
    j = np.atleast_2d(np.asarray(jac, dtype=float))
    p = np.atleast_2d(np.asarray(prev_total, dtype=float))
    d = s.shape[0]
    if s.shape != (d, d) or p.shape[0] != p.shape[1] or j.shape != (d, p.shape[0]):
        raise ValueError(f"shapes {s.shape}, {j.shape}, {p.shape} are not conformable")
    return symmetrize(s + j @ p @ j.T)


BetaFitter = Callable[[PairedData, tuple], np.ndarray]


def _erm_fitter(data: PairedData, atlases) -> np.ndarray:
    return np.concatenate([erm_beta(data, at, player=i) for i, at in enumerate(atlases)])


def err_run(game: GameSpec, dmap: DistributionMap, theta0, T: int, N: int, rng: RngStream | int | None = None, *,
            atlas=None, n_mc: int = 10_000, beta_fitter: BetaFitter | None = None,
            opts: SolveOptions | None = None, with_covariance: bool = True,
            keep_samples: bool = True) -> ErrTrajectory:
    """Run ``T`` steps of empirical repeated retraining with ``N`` samples per step.

    Stream layout under ``rng``: ``child(t, 0)`` step-t samples, ``child(t, 1)``
    Jacobian Monte Carlo draws.  For ``t > 1`` the atlas parameter is refitted
    (ERM by default) on every pair ``(theta_{s-1}, Z_s)``, ``s <= t``, seen so
    far.  Without an atlas the map's own density score is used, which requires
    ``dmap.theta_score``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if N < 2:
        raise ValueError("N must be at least 2")
    theta0 = as_flat(theta0)
    if theta0.shape[0] != game.d or dmap.d != game.d:
        raise ValueError("theta0, game and map dimensions disagree")
    if not game.contains(theta0):
        raise ValueError("theta0 lies outside the parameter boxes")
    rng = as_stream(rng)
    opts = opts or SolveOptions()
    atlases = None
    if with_covariance and T > 1:
        if atlas is not None:
            atlases = as_atlases(atlas)
        elif dmap.theta_score is None:
            raise ValueError("covariance propagation needs an atlas or a map with a theta-score")
    beta_fitter = beta_fitter or _erm_fitter

    d = game.d
    est = np.empty((T, d))
    steps = np.zeros((T, d, d))
    covs = np.zeros((T, d, d))
    jacs = np.zeros((T, d, d))
    traj = ErrTrajectory(est, theta0.copy(), int(N))
    harvest_th, harvest_z = [], []
    prev = theta0
    for t in range(1, T + 1):
        diag: dict = {}
        smp = sample(dmap, prev, N, rng.child(t, 0))
        try:
            res = solve_empirical_foc(game, smp, game.project(prev), opts)
        except SolverError as exc:
            raise SolverError(f"step {t}: {exc}", exc.last_iterate, exc.residual, exc.trace) from exc
        est[t - 1] = res.theta
        if atlases is not None:
            harvest_th.append(np.broadcast_to(prev, (N, d)))
            harvest_z.append(smp.z)
        diag["solver"] = {"residual": res.residual, "sweeps": res.sweeps, "boundary": res.boundary_active}
        if with_covariance:
            steps[t - 1] = sandwich_step_covariance(game, smp, res.theta, info=diag)
            if t == 1:
                covs[0] = steps[0]
            else:
                if atlases is not None:
                    data = PairedData(np.vstack(harvest_th), np.vstack(harvest_z), dmap.z_dims)
                    beta = beta_fitter(data, atlases)
                    traj.betas.append(beta)
                    jacs[t - 1] = estimate_sol_jacobian(atlases, beta, prev, res.theta, game, n_mc,
                                                        rng.child(t, 1), samples=smp, info=diag)
                else:
                    jacs[t - 1] = _known_map_jacobian(dmap, prev, res.theta, game, n_mc, rng.child(t, 1), smp)
                covs[t - 1] = psd_repair(accumulate_covariance(steps[t - 1], jacs[t - 1], covs[t - 2]), diag)
        if keep_samples:
            traj.samples.append(smp)
        traj.diagnostics.append(diag)
        prev = res.theta
    if with_covariance:
        traj.step_covariances, traj.covariances, traj.jacobians = steps, covs, jacs
    return traj


def _known_map_jacobian(dmap: DistributionMap, theta_prev, theta_cur, game, n_mc, rng, smp):
    z = dmap.conditional_sample(np.broadcast_to(theta_prev, (n_mc, dmap.d)), rng)
    score = np.asarray(dmap.theta_score(theta_prev, z), dtype=float)
    blocks = [z[:, s] for s in dmap.player_slices()]
    g = game.gradient_rows(theta_cur, blocks)
    v = game.mean_jacobian(theta_cur, smp)
    return -ridge_solve(v, g.T @ score / n_mc)


@dataclass
class ConfidenceReport:
    estimates: np.ndarray    # (T, d)
    lower: np.ndarray
    upper: np.ndarray
    level: float
    multiplier: float
    covariances: np.ndarray
    N: int
    target: str = "theta_t"

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def covers(self, truth) -> np.ndarray:
        """Boolean ``(T, d)`` coverage of ``truth`` (``(T, d)`` per-step targets or a fixed ``(d,)`` point)."""
        truth = np.asarray(truth, dtype=float)
        truth = np.broadcast_to(truth, self.estimates.shape)
        return (self.lower <= truth) & (truth <= self.upper)


def stable_confidence_intervals(traj: ErrTrajectory, level: float = 0.95, target: str = "theta_t") -> ConfidenceReport:
    """Per-step, per-coordinate intervals ``theta_hat +- z sqrt(Sigma_ii / N)``, ``z = Phi^-1((1 + level)/2)``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if traj.covariances is None:
        raise ValueError("trajectory was run without covariance propagation")
    for t, c in enumerate(traj.covariances, start=1):
        if not is_psd(c):
            raise ValueError(f"covariance at step {t} is not symmetric PSD")
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    var = np.clip(np.diagonal(traj.covariances, axis1=1, axis2=2), 0.0, None)
    half = z * np.sqrt(var / traj.N)
    return ConfidenceReport(traj.estimates.copy(), traj.estimates - half, traj.estimates + half, level, z,
                            traj.covariances, traj.N, target)
