import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from nettomo.errors import NonFiniteLikelihood
from nettomo.gssm import (SsmParams, _WindowObjective, _innovation_solver, fit_sliding, fit_window,
                          kalman_marginal_loglik, kalman_smoother, simulate_ssm, window_loglik,
                          write_fit_csv)
from nettomo.network import build_star


def uncentred_loglik(p: SsmParams, y, a):
    """Kalman filter on the raw state x_t = rho x_{t-1} + lam + e_t."""
    n = p.lam.size
    m = p.mean.copy()
    P = np.diag(p.stationary_var)
    Q = np.diag(p.noise_var)
    ll = 0.0
    for yt in y:
        m = p.rho * m + p.lam
        P = p.rho ** 2 * P + Q
        S = a @ P @ a.T + p.sigma2 * np.eye(a.shape[0])
        v = yt - a @ m
        ll += multivariate_normal(np.zeros(a.shape[0]), S).logpdf(v)
        K = P @ a.T @ np.linalg.inv(S)
        m = m + K @ v
        P = (np.eye(n) - K @ a) @ P
    return ll


# -- likelihood oracles -------------------------------------------------------

def test_identity_rho0_matches_independent_gaussians():
    rng = np.random.default_rng(0)
    lam = np.array([2.0, 5.0, 1.0])
    p = SsmParams(lam, phi=0.3, rho=0.0, sigma2=1e-10, tau=2.0)
    y = lam + np.sqrt(0.3 * lam ** 2) * rng.standard_normal((6, 3))
    ref = norm(lam, np.sqrt(0.3 * lam ** 2)).logpdf(y).sum()
    assert kalman_marginal_loglik(p, y, np.eye(3)) == pytest.approx(ref, abs=1e-6)


def test_scalar_two_step_recursion():
    lam, phi, rho, s2, tau = 3.0, 0.2, 0.4, 0.05, 2.0
    y = np.array([[4.6], [5.3]])
    # hand-rolled scalar filter
    q = phi * lam ** tau
    mu = lam / (1 - rho)
    m, P = mu, q / (1 - rho ** 2)
    ll = 0.0
    for yt in y[:, 0]:
        m, P = rho * m + lam, rho ** 2 * P + q
        S = P + s2
        ll += -0.5 * (np.log(2 * np.pi * S) + (yt - m) ** 2 / S)
        K = P / S
        m, P = m + K * (yt - m), (1 - K) * P
    p = SsmParams(np.array([lam]), phi, rho, s2, tau)
    assert kalman_marginal_loglik(p, y, np.eye(1)) == pytest.approx(ll, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.sampled_from([2, 3]))
def test_centred_matches_uncentred_filter(seed, k):
    rng = np.random.default_rng(seed)
    A = build_star(k)
    p = SsmParams(rng.uniform(0.5, 4.0, A.n), rng.uniform(0.1, 1.0), rng.uniform(-0.8, 0.8),
                  rng.uniform(0.05, 1.0), 2.0)
    _, y = simulate_ssm(p, A, 8, rng)
    ref = uncentred_loglik(p, y, A.entries)
    assert kalman_marginal_loglik(p, y, A) == pytest.approx(ref, abs=1e-8)
    assert window_loglik(p, y, A) == pytest.approx(ref, abs=1e-8)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rho0_is_locally_iid(seed):
    rng = np.random.default_rng(seed)
    A = build_star(3)
    lam = rng.uniform(0.5, 4.0, A.n)
    p = SsmParams(lam, 0.5, 0.0, 0.2, 2.0)
    _, y = simulate_ssm(p, A, 10, rng)
    a = A.entries
    cov = 0.5 * (a * lam ** 2) @ a.T + 0.2 * np.eye(A.m)
    ref = multivariate_normal(a @ lam, cov).logpdf(y).sum()
    assert kalman_marginal_loglik(p, y, A) == pytest.approx(ref, abs=1e-8)


def test_truth_beats_doubled_lambda():
    rng = np.random.default_rng(1)
    A = build_star(2)
    p = SsmParams(np.array([20.0, 5.0, 8.0, 12.0]), 0.3, 0.1, 0.01, 2.0)
    wins = 0
    for _ in range(100):
        _, y = simulate_ssm(p, A, 23, rng)
        bad = SsmParams(2 * p.lam, p.phi, p.rho, p.sigma2, p.tau)
        wins += kalman_marginal_loglik(p, y, A) >= kalman_marginal_loglik(bad, y, A)
    assert wins >= 95


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    A = build_star(3)
    p = SsmParams(rng.uniform(1, 5, A.n), 0.4, 0.1, 0.3, 2.0)
    _, y = simulate_ssm(p, A, 23, rng)
    obj = _WindowObjective(y, A.entries, p.rho, p.sigma2, p.tau)
    theta = np.append(np.log(p.lam), np.log(p.phi))
    _, g = obj(theta)
    h = 1e-6
    fd = np.array([(obj(theta + h * e)[0] - obj(theta - h * e)[0]) / (2 * h)
                   for e in np.eye(theta.size)])
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6 * np.abs(g).max())


def test_window_needs_two_observations():
    p = SsmParams(np.ones(4), 0.1)
    with pytest.raises(ValueError):
        kalman_marginal_loglik(p, np.ones((1, 4)), build_star(2))


def test_non_positive_definite_innovation():
    p = SsmParams(np.array([1e-200]), 1e-200, 0.1, 1e-320, 2.0)
    with pytest.raises(NonFiniteLikelihood):
        kalman_marginal_loglik(p, np.ones((3, 1)), np.eye(1))


@pytest.mark.parametrize("kw", [dict(lam=[1.0, -1.0], phi=1.0), dict(lam=[1.0], phi=0.0),
                                dict(lam=[1.0], phi=1.0, rho=1.0)])
def test_params_validated(kw):
    with pytest.raises(ValueError):
        SsmParams(np.asarray(kw.pop("lam")), **kw)


# -- moments of the simulator ---------------------------------------------------

def lag_cov_within(emp, theory, rel):
    # nonzero entries relative to themselves; structural zeros relative to the largest entry
    nz = theory != 0
    scale = np.abs(theory).max()
    ok_nz = np.abs(emp - theory)[nz] <= rel * np.abs(theory[nz])
    ok_z = np.abs(emp[~nz]) <= rel * scale
    return bool(ok_nz.all() and ok_z.all())


def test_simulated_mean_and_lag_covariance():
    rng = np.random.default_rng(3)
    A = build_star(2)
    p = SsmParams(np.array([10.0, 4.0, 6.0, 8.0]), 0.5, 0.5, 0.01, 2.0)
    _, y = simulate_ssm(p, A, 200_000, rng)
    np.testing.assert_allclose(y.mean(axis=0), A.entries @ p.mean, rtol=0.01)
    yc = y - y.mean(axis=0)
    lag1 = yc[1:].T @ yc[:-1] / (len(y) - 1)
    theory = p.phi * p.rho / (1 - p.rho ** 2) * (A.entries * p.lam ** 2) @ A.entries.T
    assert lag_cov_within(lag1, theory, 0.1)


# -- fitting ------------------------------------------------------------------------

def test_scalar_fit_matches_moments():
    rng = np.random.default_rng(4)
    p = SsmParams(np.array([50.0]), 0.05, 0.1, 0.01, 2.0)
    _, y = simulate_ssm(p, np.eye(1), 2000, rng)
    fit = fit_window(y, np.eye(1), rho=0.1, sigma2=0.01)
    lam_mm = (1 - 0.1) * y.mean()
    assert fit.params.lam[0] == pytest.approx(lam_mm, rel=0.05)


def test_all_zero_window_flagged():
    fit = fit_window(np.zeros((23, 4)), build_star(2))
    assert fit.at_bound
    assert np.all(fit.params.lam <= 1e-10)


def test_star4_recovery():
    rng = np.random.default_rng(5)
    A = build_star(4)
    lam = rng.uniform(50, 500, A.n)
    p = SsmParams(lam, 0.5, 0.1, 0.01, 2.0)
    _, y = simulate_ssm(p, A, 200, rng)
    fit = fit_sliding(y, A, window=23)
    err = np.abs(fit.lam_hat.mean(axis=0) - lam) / lam
    assert np.median(err) <= 0.2


def test_sliding_single_window():
    rng = np.random.default_rng(6)
    A = build_star(2)
    _, y = simulate_ssm(SsmParams(np.array([5.0, 3.0, 4.0, 6.0]), 0.2), A, 23, rng)
    fit = fit_sliding(y, A, window=23)
    assert fit.loglik.size == 1
    assert np.all(fit.phi_hat == fit.phi_hat[0])
    np.testing.assert_allclose(fit.lam_hat, np.broadcast_to(fit.lam_hat[0], fit.lam_hat.shape))
    assert np.all(fit.v_hat > 0)


def test_sliding_constant_series():
    A = build_star(2)
    y = np.tile(A.entries @ np.array([5.0, 3.0, 4.0, 6.0]), (40, 1))
    fit = fit_sliding(y, A, window=11)
    np.testing.assert_allclose(fit.x_hat, np.broadcast_to(fit.x_hat[0], fit.x_hat.shape),
                               rtol=1e-4)


def test_sliding_window_validation():
    A = build_star(2)
    with pytest.raises(ValueError):
        fit_sliding(np.ones((10, 4)), A, window=23)
    with pytest.raises(ValueError):
        fit_sliding(np.ones((30, 4)), A, window=10)


def test_smoother_variances_positive_and_means_sensible():
    rng = np.random.default_rng(7)
    A = build_star(3)
    p = SsmParams(rng.uniform(5, 20, A.n), 0.3)
    x, y = simulate_ssm(p, A, 30, rng)
    means, var = kalman_smoother(p, y, A)
    assert means.shape == x.shape and np.all(var > 0)
    np.testing.assert_allclose(means @ A.entries.T, y, atol=1.0)


def test_fit_csv(tmp_path):
    A = build_star(2)
    _, y = simulate_ssm(SsmParams(np.array([5.0, 3.0, 4.0, 6.0]), 0.2), A, 25, 0)
    fit = fit_sliding(y, A, window=23)
    path = tmp_path / "fit.csv"
    write_fit_csv(fit, path, list(A.col_names))
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t", "route", "x_hat", "v_hat", "phi_hat"]
    assert len(rows) == 25 * 4


def test_innovation_solver_survives_rank_deficient_routing():
    a = np.array([[1.0, 1, 0], [0, 1, 1], [1, 2, 1]])  # third row is redundant
    d = np.random.default_rng(0).uniform(1e16, 1e17, 3)
    S = a @ np.diag(d) @ a.T + 0.01 * np.eye(3)
    with pytest.raises(np.linalg.LinAlgError):
        np.linalg.cholesky(S)
    solve, logdet = _innovation_solver(S, 0.01)
    null = np.array([1.0, 1.0, -1.0]) / np.sqrt(3)
    # exactly, S has eigenvalue sigma2 on the null direction of A'
    assert np.allclose(solve(null), null / 0.01)
    assert np.isfinite(logdet) and logdet >= 3 * np.log(0.01)


def test_innovation_solver_matches_cholesky_when_well_conditioned():
    rng = np.random.default_rng(7)
    B = rng.standard_normal((4, 4))
    S = B @ B.T + 0.5 * np.eye(4)
    solve, logdet = _innovation_solver(S, 0.5)
    b = rng.standard_normal(4)
    assert np.allclose(solve(b), np.linalg.solve(S, b))
    assert logdet == pytest.approx(np.linalg.slogdet(S)[1])
