"""Plug-in performative optimum: atlas fitting, importance sampling and inference.

The distributional parameter is fitted either by plain empirical risk
minimisation of the atlas loss ``r`` or by the three-fold recalibrated
estimator, whose objective adds a de-correlated control variate built from a
regression of ``grad_beta r`` on ``theta``.  The plug-in optimum then solves
the importance-weighted first-order condition under a fixed proposal.
"""
from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.linalg import block_diag

from ._linalg import SingularMatrixError, psd_repair, ridge_solve, symmetrize
from .distributions import Atlas, DistributionMap, _offsets, as_atlases, as_flat, as_rows
from .rng import RngStream, as_stream
from .solvers import GameSpec, SolveOptions, SolverError, fd_jacobian, solve_blocks

WEIGHT_CLIP = 1e8
MIN_ESS_FRACTION = 0.01


class ProposalError(RuntimeError):
    """The importance-sampling proposal covers the plug-in distribution too poorly."""


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class PairedData:
    """Pairs ``(theta_k, Z_k)`` with ``theta_k ~ D_theta`` and ``Z_k ~ D(theta_k)``."""

    thetas: np.ndarray
    z: np.ndarray
    z_dims: tuple[int, ...]
    design: Callable[[int, np.random.Generator], np.ndarray] | None = None

    def __post_init__(self):
        th = np.asarray(self.thetas, dtype=float)
        z = np.asarray(self.z, dtype=float)
        th = th.reshape(-1, 1) if th.ndim == 1 else th
        z = z.reshape(-1, 1) if z.ndim == 1 else z
        if th.shape[0] != z.shape[0]:
            raise ValueError("thetas and z must have the same number of rows")
        if z.shape[1] != sum(self.z_dims):
            raise ValueError("z columns do not match z_dims")
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "z", z)

    @property
    def N(self) -> int:
        return self.thetas.shape[0]

    def player(self, i: int) -> np.ndarray:
        return self.z[:, _offsets(self.z_dims)[i]]

    def subset(self, idx) -> "PairedData":
        return PairedData(self.thetas[idx], self.z[idx], self.z_dims, self.design)


def uniform_design(low: float = -1.0, high: float = 1.0, dim: int = 1):
    """``theta ~ U(low, high)^dim``."""
    def draw(n, gen):
        return gen.uniform(low, high, size=(n, dim))
    return draw


def draw_paired_data(dmap: DistributionMap, design, N: int, rng: RngStream | int | None) -> PairedData:
    rng = as_stream(rng)
    thetas = np.asarray(design(int(N), rng.child(0).generator()), dtype=float).reshape(int(N), dmap.d)
    z = dmap.conditional_sample(thetas, rng.child(1))
    return PairedData(thetas, z, dmap.z_dims, design)


def _split_beta(beta, atlases: Sequence[Atlas]) -> list[np.ndarray]:
    if isinstance(beta, (list, tuple)) and len(beta) == len(atlases) and len(atlases) > 1:
        return [np.atleast_1d(np.asarray(b, dtype=float)) for b in beta]
    flat = as_flat(beta)
    dims = [a.beta_dim for a in atlases]
    if flat.shape[0] != sum(dims):
        raise ValueError(f"beta has {flat.shape[0]} entries, atlas expects {sum(dims)}")
    return [flat[s] for s in _offsets(dims)]


# --------------------------------------------------------------------------- fitting


def _newton_beta(thetas, z, atlas: Atlas, beta0, shift=None, tol: float = 1e-10, max_iter: int = 100):
    """Minimise ``mean r(theta, z; beta) - beta @ shift`` by damped Newton."""
    p = atlas.beta_dim
    beta = np.zeros(p) if beta0 is None else as_flat(beta0).copy()
    shift = np.zeros(p) if shift is None else np.asarray(shift, dtype=float)

    def obj(b):
        return float(np.mean(atlas.loss(thetas, z, b)) - b @ shift)

    def grad(b):
        return atlas.loss_grad(thetas, z, b).mean(axis=0) - shift

    g = grad(beta)
    for _ in range(max_iter):
        h = symmetrize(atlas.loss_hess(thetas, z, beta).mean(axis=0))
        w = np.linalg.eigvalsh(h)
        if w.min() <= 1e-12 * max(1.0, abs(w.max())):
            raise SingularMatrixError("fitting-loss Hessian is singular: the design does not identify beta")
        if np.linalg.norm(g) <= tol:
            return beta
        step = np.linalg.solve(h, g)
        t, f0 = 1.0, obj(beta)
        while obj(beta - t * step) > f0 - 1e-4 * t * (g @ step) and t > 1e-10:
            t *= 0.5
        beta = beta - t * step
        g = grad(beta)
    if np.linalg.norm(g) <= tol * 1e3:
        return beta
    raise SolverError("Newton iteration for beta did not converge", beta, float(np.linalg.norm(g)))


def erm_beta(data_fold: PairedData, atlas: Atlas, player: int = 0, beta0=None, tol: float = 1e-10) -> np.ndarray:
    """Minimiser of the fold-average fitting loss ``r``."""
    if data_fold.N < 1:
        raise ValueError("fold must be non-empty")
    return _newton_beta(data_fold.thetas, data_fold.player(player), atlas, beta0, tol=tol)


def _poly_powers(dim: int, degree: int) -> list[tuple[int, ...]]:
    powers = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), deg):
            e = [0] * dim
            for c in combo:
                e[c] += 1
            powers.append(tuple(e))
    return powers


class PolynomialRegressor:
    """Per-output polynomial least squares in ``theta`` with a small ridge."""

    def __init__(self, degree: int = 3, ridge: float = 1e-8):
        if degree < 0:
            raise ValueError("degree must be non-negative")
        self.degree = degree
        self.ridge = ridge

    def _basis(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.stack([np.prod(X ** np.array(p), axis=1) for p in self.powers_], axis=1)

    def fit(self, X, Y) -> "PolynomialRegressor":
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        Y = np.asarray(Y, dtype=float)
        Y = Y.reshape(-1, 1) if Y.ndim == 1 else Y
        n, dim = X.shape
        deg = self.degree
        while deg > 0 and len(_poly_powers(dim, deg)) > n:
            deg -= 1
        if deg != self.degree:
            warnings.warn(f"fold of size {n} too small for degree {self.degree}; using degree {deg}",
                          RuntimeWarning, stacklevel=2)
        self.degree_ = deg
        self.powers_ = _poly_powers(dim, deg)
        B = self._basis(X)
        gram = B.T @ B / n + self.ridge * np.eye(B.shape[1])
        self.coef_ = np.linalg.solve(gram, B.T @ Y / n)
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        return self._basis(X) @ self.coef_


@dataclass(frozen=True)
class RegressorSpec:
    kind: str = "poly"
    degree: int = 3
    ridge: float = 1e-8

    def build(self):
        if self.kind != "poly":
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        return PolynomialRegressor(self.degree, self.ridge)


def _make_regressor(method):
    if method is None:
        return RegressorSpec().build()
    if isinstance(method, RegressorSpec):
        return method.build()
    if hasattr(method, "fit") and hasattr(method, "predict"):
        return copy.deepcopy(method)
    raise TypeError("method must be a RegressorSpec or an object with fit/predict")


def fit_conditional_gradient(data_fold: PairedData, atlas: Atlas, beta_tilde, method=None, player: int = 0):
    """Regress ``grad_beta r(theta, Z; beta_tilde)`` on ``theta``; returns the fitted regressor."""
    if data_fold.N < 1:
        raise ValueError("fold must be non-empty")
    targets = atlas.loss_grad(data_fold.thetas, data_fold.player(player), as_flat(beta_tilde))
    return _make_regressor(method).fit(data_fold.thetas, targets)


def _predict(s_hat, thetas) -> np.ndarray:
    out = np.asarray(s_hat.predict(thetas), dtype=float)
    return out.reshape(-1, 1) if out.ndim == 1 else out


def decorrelation_matrix(data_fold: PairedData, atlas: Atlas, beta_tilde, s_hat, player: int = 0,
                         info: dict | None = None) -> np.ndarray:
    """``Cov(grad r, s_hat) Cov(s_hat)^+`` on the fold (pseudo-inverse, rank recorded)."""
    g = atlas.loss_grad(data_fold.thetas, data_fold.player(player), as_flat(beta_tilde))
    s = _predict(s_hat, data_fold.thetas)
    n, q = s.shape
    if n < q + 2:
        raise ValueError(f"fold of size {n} too small for a {q}-dimensional regressor")
    gc = g - g.mean(axis=0)
    sc = s - s.mean(axis=0)
    c_gs = gc.T @ sc / (n - 1)
    c_ss = sc.T @ sc / (n - 1)
    scale = max(float(np.max(np.abs(c_ss))), 0.0)
    if scale == 0.0:
        rank, pinv = 0, np.zeros_like(c_ss)
    else:
        pinv = np.linalg.pinv(c_ss, rcond=1e-12, hermitian=True)
        rank = int(np.linalg.matrix_rank(c_ss, tol=1e-12 * scale, hermitian=True))
    if info is not None:
        info["rank"] = rank
    return c_gs @ pinv


def _recal_shift(fold: PairedData, mc_thetas, m_hat, s_hat, N_total: int) -> np.ndarray:
    mc_thetas = np.asarray(mc_thetas, dtype=float)
    n_tilde = 0 if mc_thetas.size == 0 else mc_thetas.shape[0]
    m_hat = np.atleast_2d(np.asarray(m_hat, dtype=float))
    c = n_tilde / (N_total + n_tilde)
    s_fold = _predict(s_hat, fold.thetas).mean(axis=0)
    s_mc = _predict(s_hat, mc_thetas).mean(axis=0) if n_tilde else np.zeros_like(s_fold)
    # the fold term carries -c M mean_fold(s); the MC term +Nt/(N+Nt) M mean_mc(s) = +c M mean_mc(s)
    return c * m_hat @ (s_fold - s_mc)


def recalibrated_objective(fold: PairedData, mc_thetas, atlas: Atlas, m_hat, s_hat, N_total: int, beta,
                           player: int = 0) -> float:
    """Recalibrated fold objective evaluated at ``beta``.

    ``mean_fold[r - c beta^T M s(theta)] + (1/(N+Nt)) sum_mc beta^T M s(theta~)``
    with ``c = Nt / (N + Nt)`` and ``N`` the total pair count.
    """
    beta = as_flat(beta)
    shift = _recal_shift(fold, mc_thetas, m_hat, s_hat, N_total)
    return float(np.mean(atlas.loss(fold.thetas, fold.player(player), beta)) - beta @ shift)


def recalibrated_fold_beta(fold: PairedData, mc_thetas, atlas: Atlas, m_hat, s_hat, N_total: int,
                           player: int = 0, beta0=None, tol: float = 1e-10) -> np.ndarray:
    """Minimiser of :func:`recalibrated_objective`.

    The correction is linear in beta, so Newton uses the Hessian of ``r`` alone.
    """
    shift = _recal_shift(fold, mc_thetas, m_hat, s_hat, N_total)
    return _newton_beta(fold.thetas, fold.player(player), atlas, beta0, shift=shift, tol=tol)


def split_folds(N: int, gen: np.random.Generator, k: int = 3) -> tuple[np.ndarray, ...]:
    """Random partition into ``k`` folds of size ``N // k``; the remainder goes to the earliest folds."""
    perm = gen.permutation(N)
    sizes = [N // k + (1 if j < N % k else 0) for j in range(k)]
    out, start = [], 0
    for s in sizes:
        out.append(np.sort(perm[start:start + s]))
        start += s
    return tuple(out)


@dataclass
class RecalibratedFit:
    beta: np.ndarray
    player_betas: list[np.ndarray]
    fold_betas: list[np.ndarray]
    beta_tildes: list[np.ndarray]
    regressors: list[list]
    m_hats: list[list[np.ndarray]]
    folds: tuple[np.ndarray, ...]
    n_tilde: int
    info: dict = field(default_factory=dict)


_ROTATIONS = ((0, 1, 2), (1, 2, 0), (2, 0, 1))


def recalibrated_beta(data: PairedData, atlas, mc_theta_count: int, method=None,
                      rng: RngStream | int | None = None, design=None) -> RecalibratedFit:
    """Three-fold cross-fitted recalibrated estimate of ``beta*`` for every player.

    In rotation ``(A, B, C)`` the initial ERM fit uses fold C, the
    conditional-gradient regression fold B, and the de-correlation matrix
    and final solve fold A.  The Monte Carlo ``theta~`` draws are shared by
    all rotations.
    """
    atlases = as_atlases(atlas)
    N = data.N
    if N < 9:
        raise ValueError("recalibrated estimation needs at least 9 pairs")
    n_tilde = int(mc_theta_count)
    if n_tilde < N:
        raise ValueError(f"Monte Carlo count {n_tilde} must be at least the number of pairs {N}")
    if n_tilde < 10 * N:
        warnings.warn(f"Monte Carlo count {n_tilde} is below 10N; the correction term may inflate variance",
                      RuntimeWarning, stacklevel=2)
    design = design or data.design
    if design is None:
        raise ValueError("a design distribution for theta is required to draw Monte Carlo thetas")
    rng = as_stream(rng)
    folds = split_folds(N, rng.child(0).generator())
    mc_thetas = np.asarray(design(n_tilde, rng.child(1).generator()), dtype=float).reshape(n_tilde, -1)
    parts = [data.subset(f) for f in folds]

    fit = RecalibratedFit(beta=np.empty(0), player_betas=[], fold_betas=[], beta_tildes=[], regressors=[],
                          m_hats=[], folds=folds, n_tilde=n_tilde, info={"ranks": []})
    for i, at in enumerate(atlases):
        fb, bt, regs, ms, ranks = [], [], [], [], []
        for r_idx, (a, b, c) in enumerate(_ROTATIONS):
            try:
                beta_t = erm_beta(parts[c], at, player=i)
                s_hat = fit_conditional_gradient(parts[b], at, beta_t, method, player=i)
                inf: dict = {}
                m_hat = decorrelation_matrix(parts[a], at, beta_t, s_hat, player=i, info=inf)
                beta_j = recalibrated_fold_beta(parts[a], mc_thetas, at, m_hat, s_hat, N, player=i, beta0=beta_t)
            except (SolverError, SingularMatrixError, ValueError) as exc:
                raise type(exc)(f"rotation {r_idx + 1}, player {i}: {exc}") from exc
            fb.append(beta_j)
            bt.append(beta_t)
            regs.append(s_hat)
            ms.append(m_hat)
            ranks.append(inf["rank"])
        weights = np.array([len(f) / N for f in folds])
        fb_arr = np.array(fb)
        fit.player_betas.append(weights @ fb_arr)
        fit.fold_betas.append(fb_arr)
        fit.beta_tildes.append(np.array(bt))
        fit.regressors.append(regs)
        fit.m_hats.append(ms)
        fit.info["ranks"].append(ranks)
    fit.beta = np.concatenate(fit.player_betas)
    return fit


# --------------------------------------------------------------------------- covariance of beta


def beta_covariance(data: PairedData, atlas, beta_hat, inner_mc: int = 100,
                    rng: RngStream | int | None = None, resampler: DistributionMap | None = None,
                    method: str = "recalibrated", info: dict | None = None,
                    n_tilde: int | None = None) -> np.ndarray:
    """Block-diagonal sandwich covariance of the fitted ``beta``.

    ``method="recalibrated"``: ``H^-1 (V_a - V_b) H^-1`` where ``V_b`` is the
    spread of within-theta averages of ``grad r`` over ``inner_mc`` fresh
    draws ``Z | theta_k`` from ``resampler``.  ``method="erm"``:
    ``H^-1 V_a H^-1``.  ``info["richardson"]`` holds the covariance with
    ``V_b`` extrapolated to infinitely many inner draws.

    With ``n_tilde`` (the Monte Carlo theta count of the fit) the finite-Nt
    variance ``H^-1 (V_a - c V_b) H^-1``, ``c = Nt / (N + Nt)``, is returned
    instead of its ``Nt -> infinity`` limit.
    """
    atlases = as_atlases(atlas)
    betas = _split_beta(beta_hat, atlases)
    if method not in ("recalibrated", "erm"):
        raise ValueError(f"unknown method {method!r}")
    recal = method == "recalibrated"
    M = int(inner_mc)
    if recal:
        if resampler is None:
            raise ValueError("the recalibrated covariance needs a resampler for Z | theta")
        if M < 1:
            raise ValueError("inner_mc must be at least 1")
    N = data.N
    c_b = 1.0 if n_tilde is None else n_tilde / (N + n_tilde)
    rng = as_stream(rng)
    resampled = None
    if recal:
        resampled = resampler.conditional_sample(np.repeat(data.thetas, M, axis=0), rng)
    blocks, rich_blocks = [], []
    inner_slices = _offsets(data.z_dims)
    for i, (at, b) in enumerate(zip(atlases, betas)):
        z = data.player(i)
        h = symmetrize(at.loss_hess(data.thetas, z, b).mean(axis=0))
        g = at.loss_grad(data.thetas, z, b)
        gc = g - g.mean(axis=0)
        v = gc.T @ gc / N
        rich = None
        if recal:
            zi = resampled[:, inner_slices[i]]
            gi = at.loss_grad(np.repeat(data.thetas, M, axis=0), zi, b).reshape(N, M, -1)
            avg = gi.mean(axis=1)
            ac = avg - avg.mean(axis=0)
            v_b = ac.T @ ac / N
            if M >= 2:
                half = gi[:, : M // 2].mean(axis=1)
                hc = half - half.mean(axis=0)
                v_b_half = hc.T @ hc / N
                rich = v - c_b * (2.0 * v_b - v_b_half)
            v = v - c_b * v_b
        hinv_v = ridge_solve(h, v, info=info)
        blocks.append(ridge_solve(h, hinv_v.T).T)
        if rich is not None:
            tmp = ridge_solve(h, rich)
            rich_blocks.append(ridge_solve(h, tmp.T).T)
    out = psd_repair(block_diag(*blocks), info)
    if info is not None and len(rich_blocks) == len(blocks) and rich_blocks:
        info["richardson"] = psd_repair(block_diag(*rich_blocks))
    return out


# --------------------------------------------------------------------------- importance sampling


@dataclass(frozen=True)
class GaussianProposal:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "std", np.atleast_1d(np.asarray(self.std, dtype=float)))
        if np.any(self.std <= 0):
            raise ValueError("proposal standard deviations must be positive")

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * gen.standard_normal((n, self.mean.shape[0]))

    def logpdf(self, z) -> np.ndarray:
        return stats.norm.logpdf(np.atleast_2d(z), self.mean, self.std).sum(axis=1)


def default_proposal(atlas, beta_hat, scale: float = 3.0) -> list[GaussianProposal]:
    """Gaussian at the atlas mean for ``theta = 0`` with ``scale`` times the atlas noise std."""
    atlases = as_atlases(atlas)
    betas = _split_beta(beta_hat, atlases)
    return [GaussianProposal(np.asarray(at.mean(np.zeros((1, at.theta_dim)), b))[0], scale * at.noise_std)
            for at, b in zip(atlases, betas)]


def _ess(w) -> float:
    return float(w.sum() ** 2 / np.sum(w * w)) if np.any(w > 0) else 0.0


class _ISProblem:
    """Importance-weighted per-player gradients on a fixed set of proposal draws."""

    def __init__(self, atlases, game: GameSpec, proposals, n: int, rng: RngStream):
        if len(atlases) != game.m or len(proposals) != game.m:
            raise ValueError("need one atlas and one proposal per player")
        self.atlases = atlases
        self.game = game
        self.proposals = proposals
        self.slices = game.slices()
        self.z = [q.sample(n, rng.child(i).generator()) for i, q in enumerate(proposals)]
        self.logq = [q.logpdf(z) for q, z in zip(proposals, self.z)]
        self.n = n

    def weights(self, i, theta, beta_i):
        logw = self.atlases[i].logpdf(theta, self.z[i], beta_i) - self.logq[i]
        clipped = logw > math.log(WEIGHT_CLIP)
        return np.exp(np.minimum(logw, math.log(WEIGHT_CLIP))), int(clipped.sum())

    def ess(self, i, theta, beta_i) -> float:
        return _ess(self.weights(i, theta, beta_i)[0])

    def player_rows(self, i, theta, beta_i) -> np.ndarray:
        z = self.z[i]
        w, _ = self.weights(i, theta, beta_i)
        score = self.atlases[i].theta_score(theta, z, beta_i)[:, self.slices[i]]
        ell = self.game.losses[i](theta, z)
        grad = self.game.grads[i](theta, z)
        return w[:, None] * (ell[:, None] * score + grad)

    def player_gradient(self, i, theta, beta_i) -> np.ndarray:
        return self.player_rows(i, theta, beta_i).mean(axis=0)

    def gradient(self, theta, betas) -> np.ndarray:
        return np.concatenate([self.player_gradient(i, theta, b) for i, b in enumerate(betas)])


@dataclass
class PluginOptimum:
    theta: np.ndarray
    proposal: list
    n: int
    max_weight: float
    ess: float
    n_clipped: int
    residual: float
    mc_cov: np.ndarray | None = None
    sigma_beta: np.ndarray | None = None
    jacobian: np.ndarray | None = None
    sigma_theta: np.ndarray | None = None


def _proposal_list(proposal, atlases, betas):
    if proposal is None:
        return default_proposal(atlases, betas if len(atlases) > 1 else betas[0])
    if isinstance(proposal, (list, tuple)):
        return list(proposal)
    return [proposal]


def plugin_optimum(atlas, beta_hat, game: GameSpec, proposal=None, n: int = 100_000,
                   rng: RngStream | int | None = None, opts: SolveOptions | None = None,
                   theta_init=None) -> PluginOptimum:
    """Solve ``(1/n) sum_k grad_theta[w_k(theta) l(theta, Z_k)] = 0`` with ``Z_k ~ q``.

    ``w_k = p_beta(theta, Z_k) / q(Z_k)`` is clipped at ``1e8``.  Players are
    coupled by best-response sweeps; each block Jacobian is a central finite
    difference of the weighted mean gradient on the fixed draws.
    """
    if n < 1000:
        raise ValueError("importance sampling needs n >= 1000")
    atlases = as_atlases(atlas)
    betas = _split_beta(beta_hat, atlases)
    proposals = _proposal_list(proposal, atlases, betas)
    prob = _ISProblem(atlases, game, proposals, int(n), as_stream(rng))
    slices = game.slices()
    theta0 = np.zeros(game.d) if theta_init is None else as_flat(theta_init)

    def residual(i, th):
        # points the proposal does not cover carry no information; the line search backs off from them
        if any(prob.ess(j, th, b) < MIN_ESS_FRACTION * n for j, b in enumerate(betas)):
            return np.full(game.theta_dims[i], 1e300)
        return prob.player_gradient(i, th, betas[i])

    def block_jac(i, th):
        s = slices[i]

        def f(y):
            full = th.copy()
            full[s] = y
            return prob.player_gradient(i, full, betas[i])
        jac = np.atleast_2d(fd_jacobian(f, th[s]))
        if not np.any(jac):
            raise ProposalError(f"importance weights vanish around theta = {th}; the proposal does not cover "
                                "the plug-in distribution")
        return jac

    res = solve_blocks(residual, theta0, game.theta_dims, game.boxes, opts, block_jacobian=block_jac)
    max_w, ess, clipped = 0.0, math.inf, 0
    for i, b in enumerate(betas):
        w, c = prob.weights(i, res.theta, b)
        clipped += c
        max_w = max(max_w, float(w.max()))
        ess_i = _ess(w)
        ess = min(ess, ess_i)
        if ess_i < MIN_ESS_FRACTION * n:
            raise ProposalError(f"effective sample size {ess_i:.1f} < 1% of n={n} for player {i}; "
                                "use a proposal that better covers the plug-in distribution")
    # Monte Carlo covariance of theta_hat for fixed beta: J1^-1 Cov(rows) J1^-T / n
    rows = np.concatenate([prob.player_rows(i, res.theta, b) for i, b in enumerate(betas)], axis=1)
    rc = rows - rows.mean(axis=0)
    c_rows = rc.T @ rc / n
    j1 = np.atleast_2d(fd_jacobian(lambda th: prob.gradient(th, betas), res.theta))
    left = ridge_solve(j1, c_rows)
    mc_cov = psd_repair(ridge_solve(j1, left.T).T / n)
    return PluginOptimum(theta=res.theta, proposal=proposals, n=int(n), max_weight=max_w, ess=ess,
                         n_clipped=clipped, residual=res.residual, mc_cov=mc_cov)


def importance_risk(atlas, beta_hat, theta, game: GameSpec, proposal=None, n: int = 100_000,
                    rng: RngStream | int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-player ``(1/n) sum_k w_k l_i(theta, Z_k)`` and its Monte Carlo standard error."""
    atlases = as_atlases(atlas)
    betas = _split_beta(beta_hat, atlases)
    proposals = _proposal_list(proposal, atlases, betas)
    prob = _ISProblem(atlases, game, proposals, int(n), as_stream(rng))
    theta = as_flat(theta)
    means, ses = [], []
    for i, b in enumerate(betas):
        w, _ = prob.weights(i, theta, b)
        v = w * game.losses[i](theta, prob.z[i])
        means.append(v.mean())
        ses.append(v.std(ddof=1) / math.sqrt(n))
    return np.array(means), np.array(ses)


def plugin_jacobian(atlas, beta_hat, theta_hat, game: GameSpec, proposal=None, n: int = 100_000,
                    rng: RngStream | int | None = None, info: dict | None = None) -> np.ndarray:
    """``J_sol(beta) = -J1^-1 J2`` with ``J1 = dG/dtheta^T`` and ``J2 = dG/dbeta^T`` under ``q``.

    Both derivatives are central differences of the importance-weighted mean
    gradient on one fixed set of proposal draws; pass the same ``rng`` as to
    :func:`plugin_optimum` to reuse its draws.
    """
    atlases = as_atlases(atlas)
    betas = _split_beta(beta_hat, atlases)
    proposals = _proposal_list(proposal, atlases, betas)
    prob = _ISProblem(atlases, game, proposals, int(n), as_stream(rng))
    theta_hat = as_flat(theta_hat)
    beta_flat = np.concatenate(betas)
    dims = [a.beta_dim for a in atlases]

    def g_beta(bf):
        return prob.gradient(theta_hat, [bf[s] for s in _offsets(dims)])

    j1 = np.atleast_2d(fd_jacobian(lambda th: prob.gradient(th, betas), theta_hat))
    j2 = np.atleast_2d(fd_jacobian(g_beta, beta_flat)).reshape(game.d, beta_flat.shape[0])
    if info is not None:
        info["J1"], info["J2"] = j1, j2
    return -ridge_solve(j1, j2, info=info)


def optimum_covariance(jac, sigma_beta) -> np.ndarray:
    """``J Sigma_beta J^T``, symmetrized."""
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    sigma_beta = np.atleast_2d(np.asarray(sigma_beta, dtype=float))
    if jac.shape[1] != sigma_beta.shape[0] or sigma_beta.shape[0] != sigma_beta.shape[1]:
        raise ValueError(f"shapes {jac.shape} and {sigma_beta.shape} are not conformable")
    return symmetrize(jac @ sigma_beta @ jac.T)


def error_gap_bound(loss_bounds: Sequence[float], misspec: Sequence[float], convexity: Sequence[float]) -> float:
    """Bound on ``||theta_PO - theta_PO^{beta*}||^2``: ``sum_i 8 M_i eta_i / lambda_i``."""
    mb, eta, lam = (np.asarray(x, dtype=float).ravel() for x in (loss_bounds, misspec, convexity))
    if not (mb.shape == eta.shape == lam.shape):
        raise ValueError("loss_bounds, misspec and convexity must have one entry per player")
    if np.any(lam <= 0):
        raise ValueError("convexity parameters must be positive")
    if np.any(mb < 0) or np.any(eta < 0):
        raise ValueError("loss bounds and misspecification levels must be non-negative")
    return float(np.sum(8.0 * mb * eta / lam))


# --------------------------------------------------------------------------- pipeline


@dataclass
class PluginInference:
    method: str
    beta: np.ndarray
    sigma_beta: np.ndarray
    optimum: PluginOptimum
    jacobian: np.ndarray
    sigma_theta: np.ndarray
    N: int
    level: float
    lower: np.ndarray
    upper: np.ndarray
    fit: RecalibratedFit | None = None

    @property
    def theta(self) -> np.ndarray:
        return self.optimum.theta

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def plugin_inference(data: PairedData, atlas, game: GameSpec, resampler: DistributionMap, *,
                     method: str = "recalibrated", n_tilde: int = 50_000, n_is: int = 100_000,
                     inner_m: int = 100, regressor=None, rng: RngStream | int | None = None,
                     proposal=None, level: float = 0.95, opts: SolveOptions | None = None,
                     theta_init=None, finite_mc: bool = True) -> PluginInference:
    """Fit beta, solve the plug-in optimum and build per-coordinate intervals.

    Stream layout under ``rng``: ``child(0)`` recalibrated fit,
    ``child(1)`` inner resampling, ``child(2)`` proposal draws (shared by
    both methods so that paired comparisons use identical draws).
    ``finite_mc`` keeps the ``O(N / Nt)`` term in the beta covariance.
    """
    rng = as_stream(rng)
    atlases = as_atlases(atlas)
    fit = None
    if method == "recalibrated":
        fit = recalibrated_beta(data, atlases, n_tilde, regressor, rng.child(0))
        beta = fit.beta
    elif method == "erm":
        beta = np.concatenate([erm_beta(data, at, player=i) for i, at in enumerate(atlases)])
    else:
        raise ValueError(f"unknown method {method!r}")
    sigma_beta = beta_covariance(data, atlases, beta, inner_m, rng.child(1), resampler, method=method,
                                 n_tilde=n_tilde if finite_mc else None)
    opt = plugin_optimum(atlases, beta, game, proposal, n_is, rng.child(2), opts, theta_init)
    jac = plugin_jacobian(atlases, beta, opt.theta, game, opt.proposal, n_is, rng.child(2))
    sigma_theta = optimum_covariance(jac, sigma_beta)
    opt.sigma_beta, opt.jacobian, opt.sigma_theta = sigma_beta, jac, sigma_theta
    z = stats.norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(np.clip(np.diag(sigma_theta), 0.0, None) / data.N)
    return PluginInference(method, beta, sigma_beta, opt, jac, sigma_theta, data.N, level,
                           opt.theta - half, opt.theta + half, fit)
