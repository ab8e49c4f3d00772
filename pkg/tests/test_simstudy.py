import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nettomo.errors import ShapeMismatch
from nettomo.multilevel import FilterConfig
from nettomo.network import aggregate, build_star
from nettomo.simstudy import (StudyConfig, StudyResult, l_errors, load_config, read_pool_csv,
                              relative_errors, run_relerr_experiment, run_star_benchmark,
                              simulate_design, sparsity, two_stage_priors, write_results_csv)

TINY = StudyConfig(filter=FilterConfig(n_particles=40, n_move=1, rda_steps_per_draw=5), seed=3)


def reference_errors(xh, x):
    T, n = len(x), len(x[0])
    l1, l2 = [], []
    for t in range(T):
        a = b = 0.0
        for j in range(n):
            a += abs(xh[t][j] - x[t][j])
            b += (xh[t][j] - x[t][j]) ** 2
        l1.append(a)
        l2.append(b ** 0.5)

    def mean_se(v):
        m = sum(v) / T
        sd = (sum((u - m) ** 2 for u in v) / (T - 1)) ** 0.5
        return m, sd / T ** 0.5

    return (*mean_se(l1), *mean_se(l2))


# -- error metrics ----------------------------------------------------------------

def test_errors_zero_for_exact_estimate():
    x = np.random.default_rng(0).random((5, 4))
    assert l_errors(x, x) == (0.0, 0.0, 0.0, 0.0)


def test_constant_offset():
    x = np.random.default_rng(1).random((7, 9))
    l1, se1, l2, se2 = l_errors(x + 2.5, x)
    assert l1 == pytest.approx(9 * 2.5)
    assert l2 == pytest.approx(2.5 * 3)
    assert se1 == pytest.approx(0.0, abs=1e-12) and se2 == pytest.approx(0.0, abs=1e-12)


def test_matches_loop_reference():
    rng = np.random.default_rng(2)
    x, xh = rng.gamma(1.0, 10.0, (30, 6)), rng.gamma(1.0, 10.0, (30, 6))
    np.testing.assert_allclose(l_errors(xh, x), reference_errors(xh.tolist(), x.tolist()),
                               rtol=1e-12)


def test_errors_shape_checked():
    with pytest.raises(ShapeMismatch):
        l_errors(np.zeros((3, 2)), np.zeros((3, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(2, 20), n=st.integers(1, 10))
def test_errors_route_permutation_invariant(seed, T, n):
    rng = np.random.default_rng(seed)
    x, xh = rng.random((T, n)), rng.random((T, n))
    p = rng.permutation(n)
    np.testing.assert_allclose(l_errors(xh[:, p], x[:, p]), l_errors(xh, x), rtol=1e-12)


# -- sparsity -------------------------------------------------------------------------------

def test_sparsity_zero_without_zero_counters():
    A = build_star(3)
    y = aggregate(A, np.random.default_rng(3).gamma(1.0, 5.0, (10, 9)) + 0.1)
    assert sparsity(y, A) == 0.0


def test_sparsity_counts_pinned_routes():
    A = build_star(2)
    x = np.array([[1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]])  # node 0 silent at t=1
    assert sparsity(aggregate(A, x), A) == pytest.approx(np.log10((1 + 0.5) / 2))


# -- simulation design -----------------------------------------------------------------------

def test_design_levels():
    A = build_star(3)
    cfg = StudyConfig(T=50)
    lam, x, y = simulate_design(A, cfg, np.random.default_rng(4))
    assert lam.shape == x.shape == (50, 9) and y.shape == (50, 6)
    np.testing.assert_allclose(y, aggregate(A, x))


def test_design_initial_spread():
    # initial intensities: median 500, geometric sd 6, then one step of log-normal noise
    rng = np.random.default_rng(5)
    A = build_star(9)
    cfg = StudyConfig(T=1, rho=0.0)
    draws = []
    for _ in range(200):
        lam, _, _ = simulate_design(A, cfg, rng)
        draws.append(lam[0])
    ll = np.log(np.concatenate(draws))
    assert np.median(ll) == pytest.approx(np.log(500), abs=0.15)
    sd = np.sqrt(np.log(6) ** 2 + np.log(5) / 2)
    assert ll.std() == pytest.approx(sd, rel=0.05)


def test_two_stage_priors_shapes():
    A = build_star(3)
    _, x, y = simulate_design(A, StudyConfig(T=30), np.random.default_rng(6))
    pri, x1 = two_stage_priors(y, A)
    assert pri.theta1.shape == (30, 9) and x1.shape == (30, 9)
    assert pri.rho == 0.9
    np.testing.assert_allclose(x1 @ A.entries.T, y, rtol=1e-6, atol=1e-6 * y.max())


# -- experiment drivers -----------------------------------------------------------------------

def test_relerr_rows_and_reproducibility():
    a = run_relerr_experiment(["star3"], reps=2, T=25, cfg=TINY)
    b = run_relerr_experiment(["star3"], reps=2, T=25, cfg=TINY)
    assert a.failures == 0
    assert len(a.rows) == 4
    assert {r["method"] for r in a.rows} == {"naive", "two_stage"}
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]  # noqa: E731
    assert strip(a.rows) == strip(b.rows)
    rel = relative_errors(a)
    assert list(rel) == ["star3"] and len(rel["star3"]) == 2


def test_relerr_unknown_topology():
    with pytest.raises(ValueError):
        run_relerr_experiment(["ring7"], reps=1, T=25, cfg=TINY)


def test_relerr_failure_is_counted(monkeypatch):
    import nettomo.simstudy as sim

    def boom(*a, **k):
        raise RuntimeError("forced")

    monkeypatch.setattr(sim, "sirm_filter", boom)
    res = run_relerr_experiment(["star3"], reps=2, T=25, cfg=TINY)
    assert res.failures == 2 and res.rows == []


def test_relative_errors_pairs_by_rep():
    rows = [dict(topology="s", rep=0, method="naive", mean_L2=3.0),
            dict(topology="s", rep=1, method="two_stage", mean_L2=4.0),
            dict(topology="s", rep=0, method="two_stage", mean_L2=2.0),
            dict(topology="s", rep=1, method="naive", mean_L2=2.0)]
    assert relative_errors(StudyResult(rows)) == {"s": [1.5, 0.5]}


def test_benchmark_structure(tmp_path):
    rng = np.random.default_rng(7)
    pool = rng.gamma(0.5, 100.0, (25, 20))
    pool[:, :5] = 0.0  # some silent routes make sparsity negative
    res = run_star_benchmark(pool, node_counts=(2, 3), reps=2, cfg=TINY)
    assert res.failures == 0
    methods = ("ipfp", "gravity", "calibration", "naive", "two_stage")
    for k in (2, 3):
        rows = [r for r in res.rows if r["topology"] == f"star{k}"]
        assert len(rows) == 5 * 2
        assert sorted({r["method"] for r in rows}) == sorted(methods)
        assert all(r["sparsity"] <= 0 for r in rows)
    assert len({r["run"] for r in res.rows if r["method"] == "ipfp"}) == 4
    path = tmp_path / "bench.csv"
    write_results_csv(res, path, tmp_path / "bench.json")
    with open(path) as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == 20
    assert {"method", "dim", "sparsity", "log10_L2"} <= set(back[0])
    conf = json.loads((tmp_path / "bench.json").read_text())
    assert conf["node_counts"] == [2, 3] and conf["failures"] == 0


def test_benchmark_pool_too_small():
    with pytest.raises(ValueError):
        run_star_benchmark(np.ones((10, 8)), node_counts=(3,), reps=1, cfg=TINY)


def test_config_and_pool_files(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"reps": 4, "topologies": ["star3"], "seed": 9,
                                    "filter": {"n_particles": 64}}))
    cfg = load_config(cfg_path)
    assert cfg.reps == 4 and cfg.topologies == ("star3",) and cfg.filter.n_particles == 64
    pool_path = tmp_path / "pool.csv"
    pool_path.write_text("a,b,c\n1,2,3\n4,5,6\n")
    np.testing.assert_array_equal(read_pool_csv(pool_path), [[1, 2, 3], [4, 5, 6]])
