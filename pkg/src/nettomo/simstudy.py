"""Simulation designs comparing the estimators, with per-run error tables."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baselines
from .calibrate import PriorSchedule, correct, correct_and_smooth, naive_priors, priors_from_ssm
from .errors import ShapeMismatch
from .gssm import fit_sliding
from .multilevel import FilterConfig, simulate, sirm_filter
from .network import RoutingMatrix, aggregate, build_chain, build_star
from .polytope import Polytope, ipfp

log = logging.getLogger(__name__)

__all__ = [
    "l_errors",
    "TOPOLOGIES",
    "StudyConfig",
    "StudyResult",
    "simulate_design",
    "two_stage_priors",
    "run_relerr_experiment",
    "relative_errors",
    "sparsity",
    "run_star_benchmark",
    "write_results_csv",
    "read_pool_csv",
    "load_config",
]

TOPOLOGIES = {
    "chain3": lambda: build_chain(3),
    "star3": lambda: build_star(3),
    "star4": lambda: build_star(4),
    "star5": lambda: build_star(5),
    "star9": lambda: build_star(9),
}


def l_errors(x_hat, x_true):
    """Mean per-epoch L1 and L2 errors with their standard errors.

    The per-epoch errors are ``sum_j |x_hat - x|`` and
    ``sqrt(sum_j (x_hat - x)^2)``; each standard error is the sample
    standard deviation over epochs divided by ``sqrt(T)``.

    Returns
    -------
    tuple of float
        ``(mean_L1, se_L1, mean_L2, se_L2)``.
    """
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=float))
    x_true = np.atleast_2d(np.asarray(x_true, dtype=float))
    if x_hat.shape != x_true.shape:
        raise ShapeMismatch(f"estimate {x_hat.shape} vs truth {x_true.shape}")
    diff = x_hat - x_true
    l1 = np.abs(diff).sum(axis=1)
    l2 = np.sqrt((diff ** 2).sum(axis=1))
    T = l1.size
    ddof = 1 if T > 1 else 0
    se = lambda v: float(v.std(ddof=ddof) / np.sqrt(T))  # noqa: E731
    return float(l1.mean()), se(l1), float(l2.mean()), se(l2)


@dataclass(frozen=True)
class StudyConfig:
    """Settings shared by the simulation designs.

    ``filter`` configures both particle-filter runs; its seed is replaced by
    a per-run stream derived from ``seed``.
    """

    topologies: tuple = ("chain3", "star3", "star4")
    reps: int = 30
    T: int = 300
    rho: float = 0.5
    lambda_median: float = 500.0
    lambda_gsd: float = 6.0
    window: int = 23
    ssm_rho: float = 0.1
    ssm_sigma2: float = 0.01
    prior_rho: float = 0.9
    seed: int = 0
    n_jobs: int = 1
    filter: FilterConfig = field(default_factory=FilterConfig)

    def to_dict(self):
        d = asdict(self)
        d["topologies"] = list(self.topologies)
        return d


def load_config(path) -> StudyConfig:
    """Read a JSON config; keys mirror :class:`StudyConfig`, ``filter`` nests."""
    with open(path) as fh:
        raw = json.load(fh)
    fcfg = FilterConfig(**raw.pop("filter", {}))
    if "topologies" in raw:
        raw["topologies"] = tuple(raw["topologies"])
    if "node_counts" in raw:
        raw.pop("node_counts")
    return StudyConfig(filter=fcfg, **raw)


@dataclass
class StudyResult:
    rows: list
    failures: int = 0
    elapsed: float = 0.0
    config: dict = field(default_factory=dict)

    def column(self, name, **where):
        return [r[name] for r in self.rows if all(r[k] == v for k, v in where.items())]


def _truth_priors(A, T, lam0, rho):
    n = A.n
    return PriorSchedule(
        np.tile((1 - rho) * np.log(lam0), (T, 1)),
        np.full((T, n), np.log(5.0) / 2),
        np.full(T, 1.5),
        n / 2,
        rho,
        2.0,
    )


def simulate_design(A: RoutingMatrix, cfg: StudyConfig, rng):
    """Simulated ``(lam, x, y)`` for one replicate of the relative-error design.

    Initial intensities are log-normal with the configured median and
    geometric standard deviation; ``theta1 = (1 - rho) log lambda0`` keeps
    each route's stationary level at its initial draw.
    """
    lam0 = np.exp(np.log(cfg.lambda_median) + np.log(cfg.lambda_gsd) * rng.standard_normal(A.n))
    return simulate(_truth_priors(A, cfg.T, lam0, cfg.rho), lam0, A, rng=rng)


def two_stage_priors(y, A, window=23, ssm_rho=0.1, sigma2=0.01, prior_rho=0.9):
    """Fit the Gaussian state-space model and turn it into priors.

    Returns ``(priors, x_stage1)`` where ``x_stage1`` is the per-epoch
    IPFP-corrected state-space estimate (before the running median).
    """
    fit = fit_sliding(y, A, window=window, rho=ssm_rho, sigma2=sigma2)
    x_corr, _ = correct(fit.x_hat, A, y)
    x_smooth = correct_and_smooth(fit.x_hat, A, y)
    v = np.maximum(fit.v_hat, np.finfo(float).tiny)
    return priors_from_ssm(x_smooth, v, fit.phi_hat, rho=prior_rho), x_corr


def _filter_cfg(cfg: StudyConfig, seed):
    return replace(cfg.filter, seed=int(seed))


def _relerr_rep(args):
    name, rep, seed, cfg = args
    A = TOPOLOGIES[name]()
    ss = np.random.SeedSequence(seed)
    sim_seed, filt_seed = ss.spawn(2)
    rng = np.random.default_rng(sim_seed)
    _, x, y = simulate_design(A, cfg, rng)
    fseed = int(filt_seed.generate_state(1)[0])
    priors, _ = two_stage_priors(y, A, cfg.window, cfg.ssm_rho, cfg.ssm_sigma2, cfg.prior_rho)
    naive = naive_priors(A.n, cfg.T, rho=cfg.prior_rho)
    rows = []
    for method, pri in (("naive", naive), ("two_stage", priors)):
        t0 = time.perf_counter()
        post = sirm_filter(y, A, pri, _filter_cfg(cfg, fseed))
        l1, se1, l2, se2 = l_errors(post.mean, x)
        rows.append(dict(topology=name, dim=A.dim, rep=rep, method=method,
                         mean_L1=l1, se_L1=se1, mean_L2=l2, se_L2=se2,
                         median_ess=float(np.median(post.ess)),
                         seconds=time.perf_counter() - t0))
    return rows


def _safe(fn, job):
    try:
        return fn(job), None
    except Exception as exc:  # one failed replicate must not sink the study
        return [], f"{job[:2]}: {exc!r}"


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(_safe, [fn] * len(jobs), jobs))
    else:
        outcomes = [_safe(fn, job) for job in jobs]
    rows, failures = [], 0
    for got, err in outcomes:
        rows.extend(got)
        if err is not None:
            failures += 1
            log.error("replicate %s failed", err)
    return rows, failures


def run_relerr_experiment(topologies=("chain3", "star3", "star4"), reps=30, T=300,
                          cfg: StudyConfig | None = None) -> StudyResult:
    """Naive versus two-stage filtering on data simulated from the model.

    Each replicate simulates ``T`` epochs, then runs the particle filter
    once with random-walk priors and once with priors calibrated from the
    Gaussian state-space fit.  Rows carry ``topology, dim, rep, method,
    mean_L1, se_L1, mean_L2, se_L2, median_ess, seconds``.
    """
    cfg = replace(cfg or StudyConfig(), topologies=tuple(topologies), reps=reps, T=T)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.topologies) * reps)
    jobs = []
    for i, name in enumerate(cfg.topologies):
        if name not in TOPOLOGIES:
            raise ValueError(f"unknown topology {name!r}")
        for rep in range(reps):
            s = seeds[i * reps + rep]
            jobs.append((name, rep, int(s.generate_state(1)[0]), cfg))
    t0 = time.perf_counter()
    rows, failures = _run_jobs(_relerr_rep, jobs, cfg.n_jobs)
    if failures:
        log.warning("%d replicates failed and were excluded", failures)
    return StudyResult(rows, failures, time.perf_counter() - t0, cfg.to_dict())


def relative_errors(result: StudyResult, metric="mean_L2") -> dict:
    """Per-topology list of naive over two-stage error ratios, paired by replicate."""
    out = {}
    for r in result.rows:
        if r["method"] != "naive":
            continue
        match = [q for q in result.rows if q["method"] == "two_stage"
                 and q["topology"] == r["topology"] and q["rep"] == r["rep"]]
        if match:
            out.setdefault(r["topology"], []).append(r[metric] / match[0][metric])
    return out


def sparsity(y, A: RoutingMatrix) -> float:
    """``log10`` of the average share of routes not forced to zero by a zero counter."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    shares = [Polytope(A, yt).active.size / A.n for yt in y]
    m = float(np.mean(shares))
    return float(np.log10(m)) if m > 0 else float("-inf")


def _ipfp_series(y, A):
    out = np.empty((y.shape[0], A.n))
    for t, yt in enumerate(y):
        out[t] = ipfp(A, yt, np.ones(A.n), max_iter=1000, tol=1e-8) if yt.any() else 0.0
    return out


def _bench_rep(args):
    k, rep, seed, pool, cfg = args
    A = build_star(k)
    n = A.n
    rng = np.random.default_rng(seed)
    cols = rng.choice(pool.shape[1], size=n, replace=False)
    x = pool[:, cols]
    y = aggregate(A, x)
    fseed = int(rng.integers(2**63 - 1))
    priors, x_cal = two_stage_priors(y, A, cfg.window, cfg.ssm_rho, cfg.ssm_sigma2, cfg.prior_rho)
    estimates = {
        "ipfp": _ipfp_series(y, A),
        "gravity": baselines.gravity_series(y, A),
        "calibration": x_cal,
        "naive": sirm_filter(y, A, naive_priors(n, y.shape[0], rho=cfg.prior_rho),
                             _filter_cfg(cfg, fseed)).mean,
        "two_stage": sirm_filter(y, A, priors, _filter_cfg(cfg, fseed)).mean,
    }
    sp = sparsity(y, A)
    rows = []
    for method, xh in estimates.items():
        l1, se1, l2, se2 = l_errors(xh, x)
        rows.append(dict(run=f"star{k}-{rep}", topology=f"star{k}", method=method, dim=A.dim,
                         sparsity=sp, mean_L1=l1, se_L1=se1, mean_L2=l2, se_L2=se2,
                         log10_L2=float(np.log10(l2)) if l2 > 0 else float("-inf"),
                         route_columns=" ".join(map(str, cols))))
    return rows


def run_star_benchmark(od_pool, node_counts=(3, 4, 5, 9), reps=10,
                       cfg: StudyConfig | None = None) -> StudyResult:
    """Star networks fed with routes sampled from a pool of real OD series.

    Each replicate draws ``k**2`` distinct columns of ``od_pool`` (a ``T x N``
    array), aggregates them through the ``k``-node star and scores IPFP,
    gravity, the calibration estimate, and the naive and two-stage filters.
    Rows carry ``run, topology, method, dim, sparsity, mean_L1, se_L1,
    mean_L2, se_L2, log10_L2`` and the sampled pool columns.
    """
    cfg = cfg or StudyConfig()
    pool = np.asarray(od_pool, dtype=float)
    if pool.ndim != 2:
        raise ShapeMismatch("od_pool must be a T x N array")
    need = max(node_counts) ** 2
    if pool.shape[1] < need:
        raise ValueError(f"pool has {pool.shape[1]} routes, the largest star needs {need}")
    if np.any(pool < 0):
        raise ValueError("pool volumes must be nonnegative")
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(node_counts) * reps)
    jobs = [(k, rep, int(seeds[i * reps + rep].generate_state(1)[0]), pool, cfg)
            for i, k in enumerate(node_counts) for rep in range(reps)]
    t0 = time.perf_counter()
    rows, failures = _run_jobs(_bench_rep, jobs, cfg.n_jobs)
    conf = cfg.to_dict()
    conf.update(node_counts=list(node_counts), reps=reps, pool_shape=list(pool.shape),
                pool_selection="uniform without replacement over pool columns")
    return StudyResult(rows, failures, time.perf_counter() - t0, conf)


def write_results_csv(result: StudyResult, path, config_path=None) -> None:
    """Write the rows, and optionally the resolved config as JSON."""
    if result.rows:
        keys = list(result.rows[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(result.rows)
    if config_path is not None:
        with open(config_path, "w") as fh:
            json.dump({**result.config, "failures": result.failures}, fh, indent=1, default=str)


def read_pool_csv(path) -> np.ndarray:
    """A ``T x N`` pool of OD series; a non-numeric first row is read as a header."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=skip))
