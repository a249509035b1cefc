import ast
from pathlib import Path

import numpy as np
import pytest

import perfinf.oracle as oracle
from perfinf import RngStream
from perfinf.oracle import gaussian_stable_path, gaussian_stable_truth, location_optimal_truth, replication_covariance


def test_gaussian_truth_first_step():
    tr = gaussian_stable_truth(0.2, [0.25, 0.25], [1.0, 2.0], 1)
    assert np.allclose(tr.theta_t, [0.2, 0.4])
    assert np.allclose(tr.sigma_t, 0.25 * np.eye(2))
    assert np.array_equal(tr.theta_ps, [0.0, 0.0])


def test_gaussian_truth_recursion():
    eps, sig = 0.3, np.diag([0.25, 0.5])
    path = gaussian_stable_path(eps, np.diag(sig), [1.0, -1.0], 12)
    prev = np.zeros((2, 2))
    for tr in path:
        # Sigma_t = Sigma + eps^2 Sigma_{t-1}
        assert np.allclose(tr.sigma_t, sig + eps ** 2 * prev)
        prev = tr.sigma_t
    assert np.allclose(path[-1].theta_t, eps ** 12 * np.array([1.0, -1.0]))
    lim = gaussian_stable_truth(eps, np.diag(sig), [1.0, -1.0], 200)
    assert np.allclose(lim.theta_t, 0.0) and np.allclose(lim.sigma_t, sig / (1 - eps ** 2))


def test_gaussian_truth_iid_case():
    for t in (1, 5):
        tr = gaussian_stable_truth(0.0, [0.25, 0.25], [1.0, 2.0], t)
        assert np.allclose(tr.sigma_t, 0.25 * np.eye(2))


def test_gaussian_truth_errors():
    with pytest.raises(ValueError):
        gaussian_stable_truth(1.0, [0.25], [1.0], 1)
    with pytest.raises(ValueError):
        gaussian_stable_truth(-0.1, [0.25], [1.0], 1)
    with pytest.raises(ValueError):
        gaussian_stable_truth(0.2, [0.25], [1.0], 0)


def test_location_truth_values():
    tr = location_optimal_truth(1.0, 0.5, 0.5)
    assert tr.beta_star == 0.5 and tr.theta_po == pytest.approx(2.0)
    assert tr.theta_grid == pytest.approx(2.0, abs=1e-4)
    assert tr.jacobian == pytest.approx(4.0)
    assert tr.sigma_beta_recal == pytest.approx(0.75)
    assert tr.sigma_beta_erm == pytest.approx(3.75)
    assert tr.sigma_theta_recal == pytest.approx(16 * 0.75)
    assert location_optimal_truth(0.0, 0.5, 0.5).theta_grid == pytest.approx(0.0, abs=1e-4)
    assert location_optimal_truth(0.5, 0.5, 0.5).theta_grid == pytest.approx(1.0, abs=1e-4)


def test_location_truth_misspecified_erm_variance():
    # brute-force E[(grad r)^2] under theta ~ U(-1, 1) with the quadratic term
    tr = location_optimal_truth(1.0, 0.5, 0.5, beta2=0.3, epsilon_mis=0.5)
    th = np.linspace(-1, 1, 200_001)
    e = 0.15
    va = np.mean(4 * th ** 2 * (1 + e * th ** 2) ** 2 + 4 * th ** 2 * 0.25)
    assert tr.sigma_beta_erm == pytest.approx(va / (2 / 3) ** 2, rel=1e-4)
    assert tr.sigma_beta_recal == pytest.approx(0.75)


def test_location_risk_minimised_at_optimum():
    tr = location_optimal_truth(1.0, 0.5, 0.5)
    grid = np.linspace(-3, 7, 1001)
    assert grid[np.argmin(tr.risk(grid))] == pytest.approx(tr.theta_po, abs=0.01)


def test_location_truth_errors():
    with pytest.raises(ValueError):
        location_optimal_truth(1.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        location_optimal_truth(1.0, 0.5, -0.1)


def test_replication_covariance_constant():
    cov = replication_covariance(lambda r: np.array([1.0, 2.0]), 60, 0)
    assert np.array_equal(cov, np.zeros((2, 2)))


def test_replication_covariance_sample_mean():
    N = 5000

    def runner(r: RngStream):
        return r.generator().normal(0.0, 0.5, (N, 2)).mean(axis=0)

    cov = replication_covariance(runner, 1000, 3, truth=0.0, N=N)
    assert np.allclose(cov, 0.25 * np.eye(2), atol=0.025)


def test_replication_covariance_errors():
    with pytest.raises(ValueError):
        replication_covariance(lambda r: 0.0, 49)
    calls = {"n": 0}

    def flaky(r):
        calls["n"] += 1
        if calls["n"] == 56:
            raise FloatingPointError("boom")
        return 0.0

    with pytest.raises(RuntimeError, match="55 completed"):
        replication_covariance(flaky, 60)


def test_oracle_imports_no_estimator_code():
    tree = ast.parse(Path(oracle.__file__).read_text())
    mods = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            mods.update(a.name for a in node.names)
        elif isinstance(node, ast.ImportFrom):
            mods.add(("." * node.level) + (node.module or ""))
    assert mods <= {"__future__", "dataclasses", "typing", "numpy", "scipy", ".rng"}
