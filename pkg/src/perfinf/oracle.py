"""Closed-form and brute-force ground truth for the built-in simulation families.

Nothing here calls estimator code: the module depends only on numpy, scipy
and the RNG helper, so tests comparing estimators against it are not
circular.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import RngStream, as_stream


@dataclass(frozen=True)
class StableTruth:
    theta_t: np.ndarray
    sigma_t: np.ndarray
    theta_ps: np.ndarray
    t: int


def gaussian_stable_truth(epsilon: float, sigma_diag, theta0, t: int) -> StableTruth:
    """Mean-estimation family ``N(eps theta, Sigma)`` under squared loss.

    Repeated retraining is ``theta_{t+1} = eps theta_t`` and the asymptotic
    covariance after ``t`` steps is ``Sigma (1 - eps^(2t)) / (1 - eps^2)``.
    """
    eps = float(epsilon)
    if not 0.0 <= eps < 1.0:
        raise ValueError("epsilon must lie in [0, 1) for the iteration to contract")
    if t < 1:
        raise ValueError("t must be at least 1")
    sig = np.diag(np.atleast_1d(np.asarray(sigma_diag, dtype=float)))
    th0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    factor = (1.0 - eps ** (2 * t)) / (1.0 - eps ** 2)
    return StableTruth(theta_t=eps ** t * th0, sigma_t=sig * factor, theta_ps=np.zeros_like(th0), t=int(t))


def gaussian_stable_path(epsilon: float, sigma_diag, theta0, T: int) -> list[StableTruth]:
    return [gaussian_stable_truth(epsilon, sigma_diag, theta0, t) for t in range(1, T + 1)]


@dataclass(frozen=True)
class OptimalTruth:
    beta_star: float
    theta_po: float
    theta_grid: float
    jacobian: float
    sigma_beta_recal: float
    sigma_beta_erm: float
    b: float
    sigma: float

    def risk(self, theta):
        """``PR(theta) = sigma^2 + (b + beta theta)^2 - 2 theta (b + beta theta) + theta^2``."""
        return _risk(np.asarray(theta, dtype=float), self.b, self.beta_star, self.sigma)

    @property
    def sigma_theta_recal(self) -> float:
        return self.jacobian ** 2 * self.sigma_beta_recal

    @property
    def sigma_theta_erm(self) -> float:
        return self.jacobian ** 2 * self.sigma_beta_erm


def _risk(theta, b, beta, sigma):
    mu = b + beta * theta
    return sigma ** 2 + mu ** 2 - 2.0 * theta * mu + theta ** 2


def location_optimal_truth(b: float, beta1: float, sigma: float, beta2: float = 0.0, epsilon_mis: float = 0.0,
                           grid=(-5.0, 5.0, 1e-4)) -> OptimalTruth:
    """Targets for the scalar location family with the linear atlas and ``theta ~ U(-1, 1)``.

    ``beta* = beta1`` because the quadratic term integrates against the odd
    weight ``theta`` to zero.  The optimum minimises ``PR`` in closed form;
    ``theta_grid`` is the brute-force minimiser on ``grid`` (lo, hi, step).

    Asymptotic variances of ``sqrt(N)(beta_hat - beta*)`` with fitting loss
    ``(Z - beta theta)^2``: the Hessian is ``E[2 theta^2] = 2/3`` and

    * ERM: ``(9/4) E[4 theta^2 (b + eps beta2 theta^2)^2 + 4 theta^2 sigma^2]``;
    * recalibrated: ``(9/4) E[4 theta^2 sigma^2] = 3 sigma^2`` (only the
      conditional noise remains).
    """
    b, beta, sigma = float(b), float(beta1), float(sigma)
    if beta == 1.0:
        raise ValueError("beta1 = 1 makes the performative risk unbounded below in theta")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    lo, hi, step = grid
    th = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    theta_grid = float(th[np.argmin(_risk(th, b, beta, sigma))])
    theta_po = b / (1.0 - beta)
    e = float(epsilon_mis) * float(beta2)
    # moments of U(-1, 1): E th^2 = 1/3, E th^4 = 1/5, E th^6 = 1/7
    va_erm = 4.0 * (b * b / 3.0 + 2.0 * b * e / 5.0 + e * e / 7.0) + 4.0 * sigma ** 2 / 3.0
    h = 2.0 / 3.0
    return OptimalTruth(beta_star=beta, theta_po=theta_po, theta_grid=theta_grid,
                        jacobian=b / (beta - 1.0) ** 2,
                        sigma_beta_recal=(4.0 * sigma ** 2 / 3.0) / h ** 2,
                        sigma_beta_erm=va_erm / h ** 2, b=b, sigma=sigma)


def replication_covariance(estimator_runner: Callable[[RngStream], np.ndarray], reps: int,
                           rng: RngStream | int | None = None, truth=0.0, N: int = 1) -> np.ndarray:
    """Sample covariance of ``sqrt(N) (estimate - truth)`` over ``reps`` runs.

    Replication ``k`` receives the substream ``rng.child(k)``.
    """
    if reps < 50:
        raise ValueError("at least 50 replications are required")
    rng = as_stream(rng)
    rows = []
    for k in range(reps):
        try:
            est = np.atleast_1d(np.asarray(estimator_runner(rng.child(k)), dtype=float)).ravel()
        except Exception as exc:
            raise RuntimeError(f"replication {k} failed after {len(rows)} completed replications: {exc}") from exc
        rows.append(est)
    x = np.sqrt(N) * (np.array(rows) - np.asarray(truth, dtype=float))
    xc = x - x.mean(axis=0)
    return xc.T @ xc / (reps - 1)
