import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import central_diff
from perfinf import (BoundaryWarning, GameSpec, ParamBox, RngStream, SolveOptions, SolverError,
                     contraction_coefficient, fixed_point_iterate, make_gaussian_location, sample,
                     solve_empirical_foc, squared_loss_game)
from perfinf.distributions import SampleSet
from perfinf.solvers import fd_jacobian


def _samples(z, dims):
    z = np.asarray(z, dtype=float)
    return SampleSet(z=z, z_dims=tuple(dims), theta=np.zeros(sum(dims)))


def coupled_game(gamma=0.3):
    """l_i = 0.5 (theta_i - z_i)^2 + gamma theta_i theta_j; Nash solves theta_i + gamma theta_j = z_i."""
    def loss(i):
        j = 1 - i
        return lambda th, z: 0.5 * (th[i] - z[:, 0]) ** 2 + gamma * th[i] * th[j]

    def grad(i):
        j = 1 - i
        return lambda th, z: (th[i] - z + gamma * th[j]).reshape(-1, 1)

    def jac(i):
        row = np.zeros((1, 2))
        row[0, i], row[0, 1 - i] = 1.0, gamma
        return lambda th, z: row

    return GameSpec((1, 1), (1, 1), (loss(0), loss(1)), (grad(0), grad(1)), (jac(0), jac(1)),
                    monotonicity=1.0 - gamma, smoothness=(1.0, 1.0))


def test_squared_loss_gradient_matches_fd():
    game = squared_loss_game((2, 1))
    gen = np.random.default_rng(0)
    for _ in range(20):
        th = gen.normal(size=3)
        z = gen.normal(size=(1, 3))
        for i, s in enumerate(game.slices()):
            def f(y, i=i, s=s):
                t = th.copy()
                t[s] = y
                return game.losses[i](t, z[:, s])[0]
            fd = central_diff(f, th[s])
            assert np.max(np.abs(fd - game.grads[i](th, z[:, s])[0])) < 1e-5


@given(st.integers(2, 50), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_squared_loss_foc_is_sample_mean(n, seed):
    z = np.random.default_rng(seed).normal(size=(n, 2))
    res = solve_empirical_foc(squared_loss_game((2,)), _samples(z, (2,)), [5.0, -5.0])
    assert np.allclose(res.theta, z.mean(axis=0), atol=1e-10)
    assert res.residual <= 1e-8


@pytest.mark.parametrize("mode", ["gauss_seidel", "simultaneous"])
def test_coupled_nash(mode):
    gamma = 0.3
    z = np.array([[1.0, -2.0], [3.0, 0.0]])
    res = solve_empirical_foc(coupled_game(gamma), _samples(z, (1, 1)), [0.0, 0.0],
                              SolveOptions(tol=1e-10, mode=mode))
    target = np.linalg.solve(np.array([[1.0, gamma], [gamma, 1.0]]), z.mean(axis=0))
    assert np.allclose(res.theta, target, atol=1e-9)
    assert res.sweeps > 1


def test_gradient_descent_path_without_jacobian():
    base = squared_loss_game((2,))
    game = GameSpec(base.theta_dims, base.z_dims, base.losses, base.grads)
    z = np.random.default_rng(3).normal(size=(200, 2))
    res = solve_empirical_foc(game, _samples(z, (2,)), [4.0, 4.0])
    assert np.allclose(res.theta, z.mean(axis=0), atol=1e-8)


def test_mean_jacobian_fd_fallback():
    base = squared_loss_game((2,), weight=1.5)
    game = GameSpec(base.theta_dims, base.z_dims, base.losses, base.grads)
    z = np.random.default_rng(4).normal(size=(10, 2))
    assert np.allclose(game.mean_jacobian([0.1, 0.2], [z]), 3.0 * np.eye(2), atol=1e-8)
    with pytest.raises(ValueError):
        game.mean_jacobian([0.1, 0.2], [z], fd_fallback=False)


def test_box_constraint_binding():
    box = ParamBox([-1.0], [1.0])
    game = squared_loss_game((1,), boxes=[box])
    z = np.full((5, 1), 3.0)
    with pytest.warns(BoundaryWarning):
        res = solve_empirical_foc(game, _samples(z, (1,)), [0.0])
    assert res.boundary_active
    assert res.theta[0] == pytest.approx(1.0)


def test_nonconvergence_raises_with_last_iterate():
    z = np.array([[1.0, -2.0]])
    with pytest.raises(SolverError) as exc:
        solve_empirical_foc(coupled_game(0.9), _samples(z, (1, 1)), [0.0, 0.0], SolveOptions(max_sweeps=2))
    assert exc.value.last_iterate is not None and exc.value.last_iterate.shape == (2,)
    assert exc.value.residual > 0


def test_cubic_foc_newton():
    game = GameSpec((1,), (1,), (lambda th, z: th[0] ** 4 / 4 - th[0] * z[:, 0],),
                    (lambda th, z: th[0] ** 3 - z,), (lambda th, z: np.array([[3.0 * th[0] ** 2]]),))
    res = solve_empirical_foc(game, _samples([[8.0]], (1,)), [10.0])
    assert res.theta[0] == pytest.approx(2.0, abs=1e-9)


def test_foc_argument_errors():
    game = squared_loss_game((2,))
    with pytest.raises(ValueError):
        solve_empirical_foc(game, _samples(np.zeros((3, 2)), (2,)), [0.0])


def test_solve_options_validation():
    for kw in ({"tol": 0.0}, {"max_inner": 0}, {"damping": 1.5}, {"mode": "jacobi"}):
        with pytest.raises(ValueError):
            SolveOptions(**kw)


def test_fd_jacobian():
    f = lambda x: np.array([x[0] ** 2 * x[1], np.sin(x[1])])
    x = np.array([0.7, -1.3])
    exact = np.array([[2 * x[0] * x[1], x[0] ** 2], [0.0, np.cos(x[1])]])
    assert np.max(np.abs(fd_jacobian(f, x) - exact)) < 1e-8


def test_fixed_point_linear_contraction():
    eps = 0.2
    res = fixed_point_iterate(lambda t: eps * t, [1.0, 2.0], tol=1e-12)
    assert np.allclose(res.theta, 0.0, atol=1e-11)
    assert res.contraction_ratio == pytest.approx(eps, rel=1e-9)
    # geometric decay along the trace
    norms = np.linalg.norm(res.trace, axis=1)
    assert np.allclose(norms[1:6] / norms[:5], eps)


def test_fixed_point_divergence():
    with pytest.raises(SolverError) as exc:
        fixed_point_iterate(lambda t: 2.0 * t + 1.0, [1.0], max_iter=20)
    assert exc.value.trace.shape == (21, 1)
    with pytest.raises(ValueError):
        fixed_point_iterate(lambda t: t, [1.0], tol=0.0)


@pytest.mark.parametrize("eps", [0.01, 0.05, 0.2, 0.9])
def test_contraction_coefficient_gaussian(eps):
    game = squared_loss_game((2,))
    dmap = make_gaussian_location(eps, [0.25, 0.25])
    assert contraction_coefficient(game, dmap) == pytest.approx(eps)
    assert game.compatible(dmap.sensitivities) is (eps < 1)


def test_contraction_coefficient_players():
    game = squared_loss_game((1, 1))
    dmap = make_gaussian_location(0.6, [1.0, 1.0], player_dims=(1, 1))
    assert contraction_coefficient(game, dmap) == pytest.approx(math.sqrt(2) * 0.6)
    assert game.compatible(dmap.sensitivities) is True
    dmap = make_gaussian_location(0.8, [1.0, 1.0], player_dims=(1, 1))
    assert contraction_coefficient(game, dmap) == pytest.approx(math.sqrt(2) * 0.8)
    assert game.compatible(dmap.sensitivities) is False


def test_contraction_coefficient_needs_metadata():
    base = squared_loss_game((1,))
    game = GameSpec(base.theta_dims, base.z_dims, base.losses, base.grads)
    with pytest.raises(ValueError):
        contraction_coefficient(game, make_gaussian_location(0.1, [1.0]))
    assert game.compatible((0.1,)) is None


def test_repeated_retraining_population_rate():
    # population RR on the Gaussian family is theta -> eps theta; linear rate equals eps
    eps = 0.05
    game = squared_loss_game((2,))
    dmap = make_gaussian_location(eps, [0.25, 0.25])
    res = fixed_point_iterate(lambda t: eps * t, [1.0, 2.0])
    assert res.contraction_ratio <= contraction_coefficient(game, dmap) + 1e-12
