"""Root finding for per-player first-order conditions and fixed-point iteration."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._linalg import ridge_solve
from .distributions import DistributionMap, ParamBox, SampleSet, _offsets, as_flat


class SolverError(RuntimeError):
    """Raised when an iteration cap is hit before the residual tolerance."""

    def __init__(self, message: str, last_iterate=None, residual: float = math.nan, trace=None):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.last_iterate = None if last_iterate is None else np.array(last_iterate, dtype=float)
        self.residual = residual
        self.trace = trace


class BoundaryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_inner: int = 10_000
    max_sweeps: int = 500
    damping: float = 1.0
    mode: str = "gauss_seidel"
    fd_hessian: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_inner < 1 or self.max_sweeps < 1:
            raise ValueError("iteration caps must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.mode not in ("gauss_seidel", "simultaneous"):
            raise ValueError(f"unknown solver mode {self.mode!r}")


@dataclass(frozen=True)
class GameSpec:
    """An m-player game with per-player losses ``l_i(theta, z^i)``.

    ``grads[i](theta, z_i)`` returns ``grad_{theta^i} l_i`` row-wise, shape
    ``(n, d_i)``.  ``grad_jacobians[i]`` (optional) returns the derivative of
    that gradient with respect to the *full* theta, shape ``(n, d_i, d)``; a
    ``(d_i, d)`` return value is taken to be constant across samples.
    """

    theta_dims: tuple[int, ...]
    z_dims: tuple[int, ...]
    losses: tuple[Callable, ...]
    grads: tuple[Callable, ...]
    grad_jacobians: tuple[Callable, ...] | None = None
    boxes: tuple[ParamBox, ...] | None = None
    monotonicity: float | None = None
    smoothness: tuple[float, ...] | None = None
    name: str = ""

    def __post_init__(self):
        m = len(self.theta_dims)
        if not (len(self.z_dims) == len(self.losses) == len(self.grads) == m):
            raise ValueError("theta_dims, z_dims, losses and grads must all have one entry per player")
        if self.grad_jacobians is not None and len(self.grad_jacobians) != m:
            raise ValueError("grad_jacobians must have one entry per player")
        if self.boxes is None:
            object.__setattr__(self, "boxes", tuple(ParamBox.unbounded(k) for k in self.theta_dims))

    @property
    def m(self) -> int:
        return len(self.theta_dims)

    @property
    def d(self) -> int:
        return sum(self.theta_dims)

    def slices(self) -> list[slice]:
        return _offsets(self.theta_dims)

    def project(self, theta) -> np.ndarray:
        theta = as_flat(theta).copy()
        for s, box in zip(self.slices(), self.boxes):
            theta[s] = box.project(theta[s])
        return theta

    def contains(self, theta) -> bool:
        theta = as_flat(theta)
        return all(box.contains(theta[s]) for s, box in zip(self.slices(), self.boxes))

    def gradient_rows(self, theta, samples: SampleSet | Sequence[np.ndarray]) -> np.ndarray:
        """Per-sample stacked gradient ``G(theta, Z_k)``, shape ``(n, d)``."""
        theta = as_flat(theta)
        blocks = samples.blocks() if isinstance(samples, SampleSet) else list(samples)
        return np.concatenate([np.asarray(g(theta, z)).reshape(z.shape[0], -1)
                               for g, z in zip(self.grads, blocks)], axis=1)

    def mean_gradient(self, theta, samples) -> np.ndarray:
        return self.gradient_rows(theta, samples).mean(axis=0)

    def mean_jacobian(self, theta, samples, fd_fallback: bool = True) -> np.ndarray:
        """``(1/n) sum_k dG(theta, Z_k)/dtheta^T``, shape ``(d, d)``."""
        theta = as_flat(theta)
        blocks = samples.blocks() if isinstance(samples, SampleSet) else list(samples)
        if self.grad_jacobians is not None:
            rows = []
            for jac, z, k in zip(self.grad_jacobians, blocks, self.theta_dims):
                j = np.asarray(jac(theta, z), dtype=float)
                rows.append(j.reshape(k, self.d) if j.ndim == 2 else j.mean(axis=0))
            return np.vstack(rows)
        if not fd_fallback:
            raise ValueError("no gradient Jacobian callback and finite-difference fallback disabled")
        return fd_jacobian(lambda th: self.mean_gradient(th, blocks), theta)

    def compatible(self, sensitivities: Sequence[float]) -> bool | None:
        if self.monotonicity is None or self.smoothness is None:
            return None
        a = self.monotonicity
        return sum((b * e / a) ** 2 for b, e in zip(self.smoothness, sensitivities)) < 1.0


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x, step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``; step ``1e-5 * (1 + ||x||)``."""
    x = as_flat(x)
    h = 1e-5 * (1.0 + np.linalg.norm(x)) if step is None else step
    cols = []
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def squared_loss_game(theta_dims: Sequence[int], weight: float = 0.5,
                      boxes: Sequence[ParamBox] | None = None) -> GameSpec:
    """Each player fits ``l_i = weight * ||z^i - theta^i||^2``."""
    dims = tuple(int(k) for k in theta_dims)
    d = sum(dims)
    w = float(weight)
    sls = _offsets(dims)

    def loss(sl):
        return lambda theta, z: w * np.sum((z - theta[sl]) ** 2, axis=1)

    def grad(sl):
        return lambda theta, z: 2.0 * w * (theta[sl] - z)

    def jac(sl):
        block = np.zeros((sl.stop - sl.start, d))
        block[:, sl] = 2.0 * w * np.eye(sl.stop - sl.start)
        return lambda theta, z: block

    return GameSpec(
        theta_dims=dims, z_dims=dims,
        losses=tuple(loss(s) for s in sls), grads=tuple(grad(s) for s in sls),
        grad_jacobians=tuple(jac(s) for s in sls),
        boxes=None if boxes is None else tuple(boxes),
        monotonicity=2.0 * w, smoothness=(2.0 * w,) * len(dims),
        name="squared_loss",
    )


@dataclass
class FocResult:
    theta: np.ndarray
    residual: float
    sweeps: int
    boundary_active: bool = False
    info: dict = field(default_factory=dict)


def _projected_residual(theta, resid, slices, boxes) -> np.ndarray:
    out = np.empty_like(resid)
    for s, box in zip(slices, boxes):
        out[s] = theta[s] - box.project(theta[s] - resid[s])
    return out


def _newton_block(res_fn, jac_fn, obj_fn, y0, box: ParamBox, tol: float, opts: SolveOptions):
    """Drive ``res_fn(y)`` to zero inside ``box``; returns ``(y, residual_norm, stuck_on_boundary)``."""
    y = box.project(y0)
    g = np.asarray(res_fn(y), dtype=float)
    gn = float(np.linalg.norm(g))
    lr = 1.0
    for _ in range(opts.max_inner):
        if gn <= tol:
            return y, gn, False
        if jac_fn is not None:
            step = ridge_solve(jac_fn(y), g)
            t = opts.damping
            while True:
                y_new = box.project(y - t * step)
                g_new = np.asarray(res_fn(y_new), dtype=float)
                gn_new = float(np.linalg.norm(g_new))
                if gn_new <= (1.0 - 1e-4 * t) * gn or t < 1e-12:
                    break
                t *= 0.5
        else:
            f0 = obj_fn(y)
            t = min(lr * 2.0, 1e6)
            while True:
                y_new = box.project(y - t * g)
                if obj_fn(y_new) <= f0 - 1e-4 * np.dot(g, y - y_new) or t < 1e-14:
                    break
                t *= 0.5
            lr = t
            g_new = np.asarray(res_fn(y_new), dtype=float)
            gn_new = float(np.linalg.norm(g_new))
        if np.array_equal(y_new, y):
            return y, gn, box.on_boundary(y)
        y, g, gn = y_new, g_new, gn_new
    return y, gn, False


def solve_blocks(residual: Callable[[int, np.ndarray], np.ndarray],
                 theta0, theta_dims: Sequence[int], boxes: Sequence[ParamBox],
                 opts: SolveOptions | None = None,
                 block_jacobian: Callable[[int, np.ndarray], np.ndarray] | None = None,
                 objective: Callable[[int, np.ndarray], float] | None = None) -> FocResult:
    """Best-response sweeps for a joint system ``residual(i, theta) = 0, i = 1..m``.

    ``residual(i, theta)`` is player i's mean gradient, ``block_jacobian(i,
    theta)`` its derivative in ``theta^i``.  Without a Jacobian, gradient
    descent with backtracking on ``objective(i, theta)`` is used.
    """
    opts = opts or SolveOptions()
    slices = _offsets(theta_dims)
    m = len(slices)
    theta = as_flat(theta0).copy()
    for s, box in zip(slices, boxes):
        theta[s] = box.project(theta[s])
    inner_tol = opts.tol / (2.0 * math.sqrt(m))
    if block_jacobian is None and objective is None:
        raise ValueError("either a block Jacobian or an objective is required")

    def full_residual(th):
        return np.concatenate([np.asarray(residual(i, th), dtype=float).ravel() for i in range(m)])

    stuck = False
    for sweep in range(1, opts.max_sweeps + 1):
        base = theta.copy()
        stuck = False
        for i, (s, box) in enumerate(zip(slices, boxes)):
            ref = theta if opts.mode == "gauss_seidel" else base

            def with_block(y, ref=ref, s=s):
                th = ref.copy()
                th[s] = y
                return th

            y, _, on_bd = _newton_block(
                lambda y: residual(i, with_block(y)),
                None if block_jacobian is None else (lambda y: block_jacobian(i, with_block(y))),
                None if objective is None else (lambda y: objective(i, with_block(y))),
                ref[s], box, inner_tol if m > 1 else opts.tol / 2.0, opts,
            )
            stuck = stuck or on_bd
            theta[s] = y
        r = full_residual(theta)
        pr = _projected_residual(theta, r, slices, boxes)
        rn = float(np.linalg.norm(r))
        if rn <= opts.tol:
            return FocResult(theta, rn, sweep, False)
        if float(np.linalg.norm(pr)) <= opts.tol and any(b.on_boundary(theta[s]) for s, b in zip(slices, boxes)):
            warnings.warn("first-order condition solved only up to a binding box constraint", BoundaryWarning,
                          stacklevel=2)
            return FocResult(theta, float(np.linalg.norm(pr)), sweep, True, {"unprojected_residual": rn})
    raise SolverError(f"no convergence after {opts.max_sweeps} sweeps", theta, float(np.linalg.norm(full_residual(theta))))


def solve_empirical_foc(game: GameSpec, samples: SampleSet, theta_init, opts: SolveOptions | None = None) -> FocResult:
    """Solve ``(1/N) sum_k G(theta, Z_k) = 0`` jointly over players.

    Each player's block is solved holding the other blocks fixed; sweeps are
    repeated until the stacked mean gradient is below ``opts.tol``.
    """
    opts = opts or SolveOptions()
    if samples.n < 1:
        raise ValueError("samples must be non-empty")
    theta_init = as_flat(theta_init)
    if theta_init.shape[0] != game.d:
        raise ValueError(f"theta_init has dimension {theta_init.shape[0]}, game expects {game.d}")
    blocks = samples.blocks()
    slices = game.slices()

    def residual(i, th):
        return game.grads[i](th, blocks[i]).mean(axis=0)

    def objective(i, th):
        return float(np.mean(game.losses[i](th, blocks[i])))

    block_jac = None
    if game.grad_jacobians is not None:
        def block_jac(i, th):
            j = np.asarray(game.grad_jacobians[i](th, blocks[i]), dtype=float)
            j = j if j.ndim == 2 else j.mean(axis=0)
            return j[:, slices[i]]

    return solve_blocks(residual, theta_init, game.theta_dims, game.boxes, opts,
                        block_jacobian=block_jac, objective=objective)


@dataclass
class FixedPointResult:
    theta: np.ndarray
    trace: np.ndarray
    contraction_ratio: float
    iterations: int


def fixed_point_iterate(map_fn: Callable[[np.ndarray], np.ndarray], theta0, tol: float = 1e-10,
                        max_iter: int = 1000) -> FixedPointResult:
    """Iterate ``theta <- map_fn(theta)`` until successive iterates are within ``tol``.

    ``contraction_ratio`` is the largest observed ratio of successive step
    lengths (NaN when fewer than two non-zero steps were taken).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    theta = as_flat(theta0).copy()
    trace = [theta.copy()]
    steps: list[float] = []
    for k in range(1, max_iter + 1):
        nxt = as_flat(map_fn(theta)).copy()
        trace.append(nxt)
        steps.append(float(np.linalg.norm(nxt - theta)))
        theta = nxt
        if steps[-1] <= tol:
            ratios = [b / a for a, b in zip(steps[:-1], steps[1:]) if a > 0 and b > 0]
            return FixedPointResult(theta, np.array(trace), max(ratios) if ratios else math.nan, k)
    raise SolverError(f"fixed-point iteration did not converge in {max_iter} steps", theta,
                      steps[-1] if steps else math.nan, trace=np.array(trace))


def contraction_coefficient(game: GameSpec, dmap: DistributionMap) -> float:
    """``C = sqrt(sum_i (beta_i * eps_i / alpha)^2)``; ``C < 1`` certifies linear convergence."""
    if game.monotonicity is None or game.smoothness is None or dmap.sensitivities is None:
        raise ValueError("contraction coefficient needs monotonicity, smoothness and sensitivity metadata")
    if len(game.smoothness) != len(dmap.sensitivities):
        raise ValueError("smoothness and sensitivities must have one entry per player")
    a = float(game.monotonicity)
    if a <= 0:
        raise ValueError("monotonicity parameter must be positive")
    return math.sqrt(sum((b * e / a) ** 2 for b, e in zip(game.smoothness, dmap.sensitivities)))
