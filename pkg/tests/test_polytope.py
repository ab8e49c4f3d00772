import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nettomo.errors import InfeasibleError, NonConvergence
from nettomo.network import RoutingMatrix, aggregate, build_chain, build_star
from nettomo.polytope import (Polytope, chord_bounds, constraint_violation, feasible_point,
                              gaussian_log_density, ipfp, rda_step,
                              sample_truncated_normal_polytope)

SIMPLEX = RoutingMatrix(np.ones((1, 3)))


def flat(X):
    return np.zeros(X.shape[0]) if X.ndim == 2 else 0.0


def assert_feasible(P, X):
    X = np.atleast_2d(X)
    assert np.all(X >= -1e-12)
    tol = 1e-8 * (1 + np.abs(P.y).max())
    resid = np.abs(X @ P.routing.entries.T - P.y).max()
    assert resid <= tol


# -- feasible points --------------------------------------------------------

def test_feasible_point_identity():
    P = Polytope(RoutingMatrix(np.eye(2)), [2.0, 5.0])
    np.testing.assert_allclose(feasible_point(P), [2.0, 5.0])


def test_feasible_point_star2():
    A = build_star(2)
    y = aggregate(A, [1.0, 2.0, 3.0, 4.0])
    x = feasible_point(Polytope(A, y))
    assert np.all(x >= 0)
    np.testing.assert_allclose(aggregate(A, x), y, atol=1e-10)


def test_zero_counter_forces_routes():
    A = build_star(3)
    x = np.array([0, 0, 0, 1, 2, 3, 4, 5, 6.0])  # node 0 sends nothing
    P = Polytope(A, aggregate(A, x))
    p = feasible_point(P)
    np.testing.assert_array_equal(p[:3], 0.0)
    assert set(P.fixed.tolist()) == {0, 1, 2}
    assert_feasible(P, p)


def test_feasible_point_interior():
    A = build_star(3)
    P = Polytope(A, aggregate(A, np.arange(1.0, 10.0)))
    assert np.all(feasible_point(P) > 0)


def test_infeasible_counters():
    A = build_star(2)
    with pytest.raises(InfeasibleError):
        feasible_point(Polytope(A, [1.0, 1.0, 5.0, 5.0]))


def test_infeasible_dim_zero():
    A = RoutingMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(InfeasibleError):
        feasible_point(Polytope(A, [1.0, 1.0, 3.0]))


# -- chords and single steps -------------------------------------------------

def test_chord_contains_zero():
    A = build_star(3)
    P = Polytope(A, aggregate(A, np.arange(1.0, 10.0)))
    x = feasible_point(P)
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = rng.standard_normal(P.dim)
        b = chord_bounds(P, x, d / np.linalg.norm(d))
        assert b.l <= 0 <= b.h


def test_dim_zero_step_unchanged():
    P = Polytope(RoutingMatrix(np.eye(3)), [1.0, 2.0, 3.0])
    x = np.array([1.0, 2.0, 3.0])
    x_new, acc = rda_step(P, x, flat, np.random.default_rng(0))
    np.testing.assert_array_equal(x_new, x)
    assert acc


def test_constant_density_always_accepts():
    P = Polytope(SIMPLEX, [1.0])
    rng = np.random.default_rng(1)
    X = np.full((50, 3), 1 / 3)
    for _ in range(100):
        X, acc = rda_step(P, X, flat, rng)
        assert acc.all()


def test_pinned_point_returned_after_retries():
    # A vertex of the simplex: most directions leave the polytope at once.
    P = Polytope(SIMPLEX, [1.0])
    x = np.array([1.0, 0.0, 0.0])
    x_new, _ = rda_step(P, x, flat, np.random.default_rng(3))
    assert_feasible(P, x_new)


def test_simplex_uniform_moments():
    # Dirichlet(1, 1, 1): mean 1/3, variance 1/18.
    P = Polytope(SIMPLEX, [1.0])
    rng = np.random.default_rng(2)
    X = np.full((200, 3), 1 / 3)
    draws = []
    for i in range(550):
        X, _ = rda_step(P, X, flat, rng)
        if i >= 50:
            draws.append(X)
    D = np.concatenate(draws)
    np.testing.assert_allclose(D.mean(axis=0), 1 / 3, atol=0.02)
    np.testing.assert_allclose(D.var(axis=0), 1 / 18, atol=0.005)


def test_linear_density_on_segment_matches_cdf():
    # f(s) proportional to 1 + s on [0, 1], with s the first coordinate.
    P = Polytope(RoutingMatrix(np.ones((1, 2))), [1.0])
    rng = np.random.default_rng(4)

    def logf(X):
        return np.log1p(np.atleast_2d(X)[:, 0])

    X = np.full((1000, 2), 0.5)
    draws = []
    for i in range(120):
        X, _ = rda_step(P, X, logf, rng)
        if i >= 20:
            draws.append(X[:, 0].copy())
    s = np.sort(np.concatenate(draws))
    cdf = (s + s ** 2 / 2) / 1.5
    emp = np.arange(1, s.size + 1) / s.size
    assert np.max(np.abs(emp - cdf)) < 0.02


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), which=st.sampled_from(["star2", "star3", "chain3"]))
def test_feasibility_preserved_over_many_steps(seed, which):
    A = {"star2": build_star(2), "star3": build_star(3), "chain3": build_chain(3)}[which]
    rng = np.random.default_rng(seed)
    x_true = rng.gamma(0.5, 10.0, A.n) * (rng.random(A.n) > 0.2)
    y = aggregate(A, x_true)
    if not y.any():
        return
    P = Polytope(A, y)
    X = np.repeat(feasible_point(P)[None], 20, axis=0)
    logf = gaussian_log_density(rng.gamma(1.0, 5.0, A.n), rng.gamma(1.0, 20.0, A.n) + 1)
    for _ in range(500):  # 20 chains x 500 steps = 10^4 steps
        X, _ = rda_step(P, X, logf, rng)
        assert_feasible(P, X)


# -- truncated normal on the polytope ----------------------------------------

def test_truncated_normal_zero_steps_returns_init():
    A = build_star(3)
    P = Polytope(A, aggregate(A, np.ones(9)))
    init = feasible_point(P)
    out = sample_truncated_normal_polytope(P, np.zeros(9), np.ones(9), 0, init,
                                           np.random.default_rng(0))
    np.testing.assert_array_equal(out, init)


def test_truncated_normal_dim_zero():
    P = Polytope(RoutingMatrix(np.eye(2)), [3.0, 4.0])
    out = sample_truncated_normal_polytope(P, [100.0, -50.0], [1e6, 1e6], 10, np.array([3.0, 4.0]),
                                           np.random.default_rng(0))
    np.testing.assert_array_equal(out, [3.0, 4.0])


# E[x1] for N((2, 0, 0), 0.5 I) restricted to the 2-simplex, by 2-d quadrature
# (a rejection sampler from uniform simplex draws agrees to 1e-3).
TRUNC_SIMPLEX_MEAN_X1 = 0.55768


def test_truncated_normal_concentrates_toward_mean():
    P = Polytope(SIMPLEX, [1.0])
    rng = np.random.default_rng(5)
    init = np.full((400, 3), 1 / 3)
    draws = []
    X = init
    for _ in range(60):
        X = sample_truncated_normal_polytope(P, [2.0, 0.0, 0.0], np.full(3, 0.5), 5, X, rng)
        draws.append(X[:, 0])
    est = np.concatenate(draws[10:]).mean()
    assert abs(est - TRUNC_SIMPLEX_MEAN_X1) < 0.01
    assert est > 1 / 3


# -- IPFP --------------------------------------------------------------------

def test_ipfp_two_by_two_table():
    A = build_star(2)  # rows are the row and column margins of a 2x2 table
    x = ipfp(A, [3.0, 7.0, 4.0, 6.0], np.ones(4), max_iter=1000, tol=1e-12)
    np.testing.assert_allclose(x.reshape(2, 2), [[1.2, 1.8], [2.8, 4.2]], atol=1e-8)


def test_ipfp_matches_direct_iteration():
    rows, cols = np.array([3.0, 7.0]), np.array([4.0, 6.0])
    t = np.ones((2, 2))
    for _ in range(200):
        t *= (rows / t.sum(axis=1))[:, None]
        t *= (cols / t.sum(axis=0))[None, :]
    np.testing.assert_allclose(t, np.outer(rows, cols) / 10, atol=1e-12)
    x = ipfp(build_star(2), np.concatenate([rows, cols]), np.ones(4))
    np.testing.assert_allclose(x.reshape(2, 2), t, atol=1e-9)


def test_ipfp_identity_one_sweep():
    y = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(ipfp(np.eye(3), y, np.ones(3), max_iter=1), y)


def test_ipfp_feasible_seed_unchanged():
    A = build_star(3)
    x = np.arange(1.0, 10.0)
    np.testing.assert_allclose(ipfp(A, aggregate(A, x), x), x, rtol=1e-10)


def test_ipfp_zero_counter():
    A = build_star(2)
    x = ipfp(A, [0.0, 5.0, 2.0, 3.0], np.ones(4))
    np.testing.assert_allclose(x, [0, 0, 2, 3], atol=1e-9)


def test_ipfp_nonconvergence_carries_iterate():
    A = build_star(3)
    y = aggregate(A, np.arange(1.0, 10.0))
    with pytest.raises(NonConvergence) as info:
        ipfp(A, y, np.ones(9) + np.arange(9) ** 3, max_iter=1, tol=1e-15)
    assert info.value.x is not None and info.value.violation > 0


def test_ipfp_shuffled_order_converges():
    A = build_star(3)
    y = aggregate(A, np.arange(1.0, 10.0))
    x = ipfp(A, y, np.ones(9), shuffle=np.random.default_rng(0))
    assert constraint_violation(A, y, x) < 1e-10


@settings(max_examples=40, deadline=None)
@given(r=st.integers(2, 4), c=st.integers(2, 4), seed=st.integers(0, 2**32 - 1))
def test_ipfp_converges_on_margin_tables(r, c, seed):
    rng = np.random.default_rng(seed)
    table = rng.gamma(1.0, 3.0, (r, c)) + 0.01
    # margins of a two-way table as a routing matrix over the r*c cells
    a = np.vstack([np.kron(np.eye(r), np.ones(c)), np.kron(np.ones(r), np.eye(c))])
    y = a @ table.ravel()
    x = ipfp(a, y, rng.random(r * c) + 0.1, max_iter=1000, tol=1e-10)
    assert np.all(x >= 0)
    assert constraint_violation(a, y, x) < 1e-10
