"""Distribution maps D(theta), parametric atlases D_beta(theta) and sampling.

Conventions used throughout the package:

* a parameter vector is handled flat, shape ``(d,)``; :class:`Theta` converts
  between the flat form and per-player blocks;
* callbacks are vectorised over rows: ``thetas`` has shape ``(n, d)`` (a single
  ``(d,)`` vector is broadcast) and ``z`` has shape ``(n, dz)``;
* per-player data columns are laid out contiguously in player order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .rng import RngStream, as_stream

_LOG_2PI = np.log(2.0 * np.pi)


def _offsets(dims: Sequence[int]) -> list[slice]:
    out, start = [], 0
    for k in dims:
        out.append(slice(start, start + k))
        start += k
    return out


def as_flat(theta) -> np.ndarray:
    if isinstance(theta, Theta):
        return theta.flatten()
    return np.atleast_1d(np.asarray(theta, dtype=float)).ravel()


def as_rows(thetas, n: int) -> np.ndarray:
    """Broadcast ``thetas`` to an ``(n, d)`` array."""
    arr = np.asarray(thetas, dtype=float)
    if arr.ndim == 1:
        return np.broadcast_to(arr, (n, arr.shape[0]))
    return arr


@dataclass(frozen=True)
class Theta:
    """Per-player parameter blocks ``(theta^1, ..., theta^m)``."""

    blocks: tuple[np.ndarray, ...]

    def __post_init__(self):
        blocks = tuple(np.atleast_1d(np.asarray(b, dtype=float)).ravel().copy() for b in self.blocks)
        if not blocks:
            raise ValueError("Theta needs at least one block")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def unflatten(cls, flat, dims: Sequence[int]) -> "Theta":
        flat = np.asarray(flat, dtype=float).ravel()
        if flat.shape[0] != sum(dims):
            raise ValueError(f"flat vector of length {flat.shape[0]} does not match dims {tuple(dims)}")
        return cls(tuple(flat[s] for s in _offsets(dims)))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(b.shape[0] for b in self.blocks)

    @property
    def m(self) -> int:
        return len(self.blocks)

    def flatten(self) -> np.ndarray:
        return np.concatenate(self.blocks)

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.flatten(), other.flatten())

    __hash__ = None


@dataclass(frozen=True)
class ParamBox:
    """Closed box ``[lower, upper]`` (infinite bounds allowed)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("lower and upper must have the same shape")
        if np.any(lo > hi):
            raise ValueError("lower must not exceed upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, dim: int) -> "ParamBox":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def project(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def on_boundary(self, x, atol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.any(np.abs(x - self.lower) <= atol) or np.any(np.abs(x - self.upper) <= atol))


@dataclass(frozen=True)
class SampleSet:
    z: np.ndarray
    z_dims: tuple[int, ...]
    theta: np.ndarray
    stream_id: str = ""

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def player(self, i: int) -> np.ndarray:
        return self.z[:, _offsets(self.z_dims)[i]]

    def blocks(self) -> list[np.ndarray]:
        return [self.z[:, s] for s in _offsets(self.z_dims)]


Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class DistributionMap:
    """A (product) distribution map ``D(theta) = D_1(theta) x ... x D_m(theta)``.

    ``marginals[i](thetas, gen)`` draws one ``z^i`` row per row of ``thetas``.
    ``logpdf`` and ``theta_score`` describe the joint density and are optional:
    the estimators never rely on the true map's density.
    """

    theta_dims: tuple[int, ...]
    z_dims: tuple[int, ...]
    marginals: tuple[Sampler, ...]
    logpdf: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    theta_score: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    sensitivities: tuple[float, ...] | None = None
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.marginals) != len(self.z_dims):
            raise ValueError("one marginal sampler per player is required")

    @property
    def m(self) -> int:
        return len(self.z_dims)

    @property
    def d(self) -> int:
        return sum(self.theta_dims)

    @property
    def dz(self) -> int:
        return sum(self.z_dims)

    def player_slices(self) -> list[slice]:
        return _offsets(self.z_dims)

    def conditional_sample(self, thetas, rng: RngStream) -> np.ndarray:
        """One draw of ``Z | theta_k`` for every row ``theta_k``.

        Player ``i`` consumes the substream ``rng.child(i)``, so the marginals
        are independent and each is reproducible on its own.
        """
        thetas = np.asarray(thetas, dtype=float)
        if thetas.ndim != 2 or thetas.shape[1] != self.d:
            raise ValueError(f"thetas must have shape (n, {self.d}), got {thetas.shape}")
        cols = [np.asarray(f(thetas, rng.child(i).generator())).reshape(thetas.shape[0], k)
                for i, (f, k) in enumerate(zip(self.marginals, self.z_dims))]
        return np.concatenate(cols, axis=1)


def sample(dmap: DistributionMap, theta, n: int, rng: RngStream | int | None) -> SampleSet:
    """Draw ``n`` i.i.d. rows from ``D(theta)``."""
    if int(n) < 1:
        raise ValueError("n must be at least 1")
    theta = as_flat(theta)
    if theta.shape[0] != dmap.d:
        raise ValueError(f"theta has dimension {theta.shape[0]}, map expects {dmap.d}")
    rng = as_stream(rng)
    z = dmap.conditional_sample(as_rows(theta, int(n)), rng)
    return SampleSet(z=z, z_dims=dmap.z_dims, theta=theta.copy(), stream_id=rng.stream_id)


@dataclass(frozen=True)
class Atlas:
    """One player's parametric family ``D_beta(theta)`` with its fitting loss ``r``.

    All callbacks take ``(thetas, z, beta)`` with ``thetas`` the *full*
    parameter vector(s).  ``loss_grad``/``loss_hess`` are derivatives of ``r``
    in ``beta``; ``theta_score`` is ``grad_theta log p_beta(theta, z)``.
    A multi-player atlas is a sequence of these, one per player.
    """

    theta_dim: int
    z_dim: int
    beta_dim: int
    logpdf: Callable
    theta_score: Callable
    sampler: Callable
    loss: Callable
    loss_grad: Callable
    loss_hess: Callable
    mean: Callable
    noise_std: np.ndarray
    smoothness: float | None = None
    misspecification: float | None = None
    name: str = ""

    def sample(self, theta, beta, n: int, rng: RngStream | int | None) -> np.ndarray:
        rng = as_stream(rng)
        return np.asarray(self.sampler(as_rows(as_flat(theta), n), np.asarray(beta, float), rng.generator()))


def as_atlases(atlas) -> tuple[Atlas, ...]:
    if isinstance(atlas, Atlas):
        return (atlas,)
    return tuple(atlas)


def _gauss_logpdf(z, mu, sd) -> np.ndarray:
    u = (z - mu) / sd
    return np.sum(-0.5 * u * u - np.log(sd) - 0.5 * _LOG_2PI, axis=1)


def make_gaussian_location(epsilon: float, sigma_diag, player_dims: Sequence[int] | None = None) -> DistributionMap:
    """``D(theta) = N(epsilon * theta, diag(sigma_diag))``.

    ``sigma_diag`` holds variances.  With ``player_dims`` the coordinates are
    split into players whose marginals are independent.
    """
    var = np.atleast_1d(np.asarray(sigma_diag, dtype=float))
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    eps = float(epsilon)
    d = var.shape[0]
    dims = tuple(player_dims) if player_dims is not None else (d,)
    if sum(dims) != d:
        raise ValueError("player_dims must sum to the number of coordinates")
    sd = np.sqrt(var)

    def marginal(sl):
        def draw(thetas, gen):
            return eps * thetas[:, sl] + sd[sl] * gen.standard_normal((thetas.shape[0], sl.stop - sl.start))
        return draw

    def logpdf(thetas, z):
        z = np.atleast_2d(z)
        return _gauss_logpdf(z, eps * as_rows(thetas, z.shape[0]), sd)

    def theta_score(thetas, z):
        z = np.atleast_2d(z)
        return eps * (z - eps * as_rows(thetas, z.shape[0])) / var

    return DistributionMap(
        theta_dims=dims, z_dims=dims,
        marginals=tuple(marginal(s) for s in _offsets(dims)),
        logpdf=logpdf, theta_score=theta_score,
        sensitivities=(eps,) * len(dims),
        name="gaussian_location",
        params={"epsilon": eps, "sigma_diag": var.tolist()},
    )


def make_location_family(b, beta1: float, beta2: float, epsilon_mis: float, sigma: float) -> DistributionMap:
    """``Z = b + beta1*theta + epsilon_mis*beta2*theta**2 + N(0, sigma^2 I)`` (coordinatewise)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    b = np.atleast_1d(np.asarray(b, dtype=float))
    d = b.shape[0]
    beta1, beta2, eps, sigma = float(beta1), float(beta2), float(epsilon_mis), float(sigma)

    def mu(thetas):
        return b + beta1 * thetas + eps * beta2 * thetas ** 2

    def draw(thetas, gen):
        return mu(thetas) + sigma * gen.standard_normal(thetas.shape)

    def logpdf(thetas, z):
        z = np.atleast_2d(z)
        return _gauss_logpdf(z, mu(as_rows(thetas, z.shape[0])), sigma)

    def theta_score(thetas, z):
        z = np.atleast_2d(z)
        th = as_rows(thetas, z.shape[0])
        return (z - mu(th)) / sigma ** 2 * (beta1 + 2.0 * eps * beta2 * th)

    return DistributionMap(
        theta_dims=(d,), z_dims=(d,), marginals=(draw,),
        logpdf=logpdf, theta_score=theta_score,
        name="location_family",
        params={"b": b.tolist(), "beta1": beta1, "beta2": beta2, "epsilon_mis": eps, "sigma": sigma},
    )


def make_linear_atlas(sigma: float, b=0.0, dim: int = 1, smoothness: float | None = None,
                      misspecification: float | None = None) -> Atlas:
    """``D_beta(theta) = N(b + beta @ theta, sigma^2 I)`` with ``r = ||Z - beta @ theta||^2``.

    ``beta`` is a ``dim x dim`` matrix stored row-major; for ``dim=1`` it is a
    scalar.  The intercept ``b`` is treated as known and does not enter ``r``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    sigma = float(sigma)
    b = np.broadcast_to(np.asarray(b, dtype=float), (dim,)).copy()

    def mat(beta):
        return np.asarray(beta, dtype=float).reshape(dim, dim)

    def mean(thetas, beta):
        thetas = np.atleast_2d(thetas)
        return b + thetas @ mat(beta).T

    def logpdf(thetas, z, beta):
        z = np.atleast_2d(z)
        return _gauss_logpdf(z, mean(as_rows(thetas, z.shape[0]), beta), sigma)

    def theta_score(thetas, z, beta):
        z = np.atleast_2d(z)
        resid = z - mean(as_rows(thetas, z.shape[0]), beta)
        return resid @ mat(beta) / sigma ** 2

    def sampler(thetas, beta, gen):
        mu = mean(thetas, beta)
        return mu + sigma * gen.standard_normal(mu.shape)

    def _resid(thetas, z, beta):
        z = np.atleast_2d(z)
        th = as_rows(thetas, z.shape[0])
        return z - th @ mat(beta).T, th

    def loss(thetas, z, beta):
        res, _ = _resid(thetas, z, beta)
        return np.sum(res * res, axis=1)

    def loss_grad(thetas, z, beta):
        res, th = _resid(thetas, z, beta)
        return (-2.0 * res[:, :, None] * th[:, None, :]).reshape(res.shape[0], dim * dim)

    def loss_hess(thetas, z, beta):
        z = np.atleast_2d(z)
        th = as_rows(thetas, z.shape[0])
        outer = th[:, :, None] * th[:, None, :]
        eye = np.eye(dim)
        return 2.0 * np.einsum("ac,nbe->nabce", eye, outer).reshape(th.shape[0], dim * dim, dim * dim)

    return Atlas(
        theta_dim=dim, z_dim=dim, beta_dim=dim * dim,
        logpdf=logpdf, theta_score=theta_score, sampler=sampler,
        loss=loss, loss_grad=loss_grad, loss_hess=loss_hess,
        mean=mean, noise_std=np.full(dim, sigma),
        smoothness=smoothness, misspecification=misspecification,
        name="linear_atlas",
    )


def make_gaussian_atlas(sigma_diag, smoothness: float | None = None,
                        misspecification: float | None = None) -> Atlas:
    """``D_beta(theta) = N(beta * theta, diag(sigma_diag))`` with scalar ``beta``.

    Fitting loss ``r = ||Z - beta * theta||^2``.  Contains the Gaussian
    location map at ``beta = epsilon``.
    """
    var = np.atleast_1d(np.asarray(sigma_diag, dtype=float))
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    sd = np.sqrt(var)
    d = var.shape[0]

    def mean(thetas, beta):
        return float(np.asarray(beta).ravel()[0]) * np.atleast_2d(thetas)

    def logpdf(thetas, z, beta):
        z = np.atleast_2d(z)
        return _gauss_logpdf(z, mean(as_rows(thetas, z.shape[0]), beta), sd)

    def theta_score(thetas, z, beta):
        z = np.atleast_2d(z)
        bt = float(np.asarray(beta).ravel()[0])
        return bt * (z - mean(as_rows(thetas, z.shape[0]), beta)) / var

    def sampler(thetas, beta, gen):
        mu = mean(thetas, beta)
        return mu + sd * gen.standard_normal(mu.shape)

    def loss(thetas, z, beta):
        z = np.atleast_2d(z)
        res = z - mean(as_rows(thetas, z.shape[0]), beta)
        return np.sum(res * res, axis=1)

    def loss_grad(thetas, z, beta):
        z = np.atleast_2d(z)
        th = as_rows(thetas, z.shape[0])
        res = z - mean(th, beta)
        return -2.0 * np.sum(th * res, axis=1, keepdims=True)

    def loss_hess(thetas, z, beta):
        z = np.atleast_2d(z)
        th = as_rows(thetas, z.shape[0])
        return 2.0 * np.sum(th * th, axis=1)[:, None, None]

    return Atlas(
        theta_dim=d, z_dim=d, beta_dim=1,
        logpdf=logpdf, theta_score=theta_score, sampler=sampler,
        loss=loss, loss_grad=loss_grad, loss_hess=loss_hess,
        mean=mean, noise_std=sd,
        smoothness=smoothness, misspecification=misspecification,
        name="gaussian_atlas",
    )


def restrict_atlas(atlas: Atlas, cols: Sequence[int], full_dim: int) -> Atlas:
    """View of ``atlas`` that reads only columns ``cols`` of a ``full_dim`` theta.

    The theta-score is embedded back into ``full_dim`` columns (zeros
    elsewhere), as required when several players' atlases are combined.
    """
    cols = np.asarray(cols, dtype=int)
    if cols.shape[0] != atlas.theta_dim:
        raise ValueError("cols must select exactly atlas.theta_dim coordinates")

    def pick(thetas):
        return np.atleast_2d(np.asarray(thetas, dtype=float))[:, cols]

    def rows(thetas, n):
        return as_rows(np.asarray(thetas, dtype=float), n)[:, cols]

    def wrap(fn):
        def inner(thetas, z, beta):
            z = np.atleast_2d(z)
            return fn(rows(thetas, z.shape[0]), z, beta)
        return inner

    def theta_score(thetas, z, beta):
        z = np.atleast_2d(z)
        out = np.zeros((z.shape[0], full_dim))
        out[:, cols] = atlas.theta_score(rows(thetas, z.shape[0]), z, beta)
        return out

    return Atlas(
        theta_dim=full_dim, z_dim=atlas.z_dim, beta_dim=atlas.beta_dim,
        logpdf=wrap(atlas.logpdf), theta_score=theta_score,
        sampler=lambda thetas, beta, gen: atlas.sampler(pick(thetas), beta, gen),
        loss=wrap(atlas.loss), loss_grad=wrap(atlas.loss_grad), loss_hess=wrap(atlas.loss_hess),
        mean=lambda thetas, beta: atlas.mean(pick(thetas), beta), noise_std=atlas.noise_std,
        smoothness=atlas.smoothness, misspecification=atlas.misspecification, name=atlas.name,
    )


def product_map(maps: Sequence[DistributionMap], theta_cols: Sequence[Sequence[int]]) -> DistributionMap:
    """Independent players, player ``i`` drawn from ``maps[i]`` at coordinates ``theta_cols[i]``.

    Each component map must be single-player.  The joint density and score
    are assembled when every component provides them.
    """
    if len(maps) != len(theta_cols):
        raise ValueError("one column set per component map")
    cols = [np.asarray(c, dtype=int) for c in theta_cols]
    d = sum(c.shape[0] for c in cols)
    dz = [mp.dz for mp in maps]
    zs = _offsets(dz)

    def marginal(mp, c):
        return lambda thetas, gen: mp.marginals[0](np.atleast_2d(thetas)[:, c], gen)

    logpdf = theta_score = None
    if all(mp.logpdf is not None and mp.theta_score is not None for mp in maps):
        def logpdf(thetas, z):
            z = np.atleast_2d(z)
            th = as_rows(thetas, z.shape[0])
            return sum(mp.logpdf(th[:, c], z[:, s]) for mp, c, s in zip(maps, cols, zs))

        def theta_score(thetas, z):
            z = np.atleast_2d(z)
            th = as_rows(thetas, z.shape[0])
            out = np.zeros((z.shape[0], d))
            for mp, c, s in zip(maps, cols, zs):
                out[:, c] += mp.theta_score(th[:, c], z[:, s])
            return out

    sens = None
    if all(mp.sensitivities is not None for mp in maps):
        sens = tuple(mp.sensitivities[0] for mp in maps)
    return DistributionMap(
        theta_dims=tuple(c.shape[0] for c in cols), z_dims=tuple(dz),
        marginals=tuple(marginal(mp, c) for mp, c in zip(maps, cols)),
        logpdf=logpdf, theta_score=theta_score, sensitivities=sens,
        name="product", params={"components": [mp.name for mp in maps]},
    )


FAMILIES: dict[str, Callable] = {
    "gaussian_location": make_gaussian_location,
    "location_family": make_location_family,
    "linear_atlas": make_linear_atlas,
    "gaussian_atlas": make_gaussian_atlas,
}


def build_family(name: str, **params):
    try:
        ctor = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}") from None
    return ctor(**params)
