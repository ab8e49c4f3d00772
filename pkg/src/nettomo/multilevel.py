"""Dynamic multilevel traffic model: simulator and resample-move particle filter.

The model for route ``j`` at epoch ``t`` is::

    log lam[t, j] = rho * log lam[t-1, j] + eps,   eps ~ N(theta1[t, j], theta2[t, j])
    phi[t]        ~ Gamma(alpha, beta[t] / alpha)
    x[t, j]       ~ N(lam[t, j], lam[t, j]**tau * (exp(phi[t]) - 1)) truncated to x > 0
    y[t]          = A x[t]
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import truncnorm

from .calibrate import PriorSchedule
from .errors import DegenerateEnsemble
from .network import RoutingMatrix, aggregate
from .polytope import Polytope, _rda, feasible_point

log = logging.getLogger(__name__)

__all__ = [
    "FilterConfig",
    "Particle",
    "PosteriorSummary",
    "simulate",
    "truncnorm_logpdf",
    "truncnorm_draw",
    "ess",
    "resample",
    "importance_log_weights",
    "sirm_filter",
    "write_estimates_csv",
    "write_diagnostics_csv",
    "dump_particles",
    "load_particles",
]

LOG_LAM_CLIP = 100.0
PHI_MAX = 50.0
INIT_LOG_SD = 1.0
PHI_STEP = 0.25
TARGET_ACCEPT = (0.2, 0.4)
_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class FilterConfig:
    """Tuning of :func:`sirm_filter`.

    Parameters
    ----------
    n_particles : int
        Ensemble size.
    n_move : int
        Metropolis-within-Gibbs sweeps after each resampling.
    rda_steps_per_draw : int
        Random-directions steps used to draw each proposal from the shared
        truncated normal.
    rda_steps_per_move : int
        Random-directions steps on ``x`` inside one move sweep.
    resampling : {"systematic", "multinomial"}
    ess_threshold : float
        Epochs whose effective sample size falls below this fraction of the
        ensemble are flagged in the diagnostics.
    seed : int or None
    keep_particles : bool
        Keep every epoch's ensemble for dumping.
    max_restarts : int
        Epoch retries, each with doubled draw steps, after all weights vanish.
    adapt : bool
        Tune the move-step scales toward 20-40% acceptance between epochs.
    """

    n_particles: int = 1000
    n_move: int = 10
    rda_steps_per_draw: int = 50
    rda_steps_per_move: int = 5
    resampling: str = "systematic"
    ess_threshold: float = 0.01
    seed: int | None = None
    keep_particles: bool = False
    max_restarts: int = 3
    adapt: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be at least 2")
        if self.n_move < 0 or self.rda_steps_per_draw < 0 or self.rda_steps_per_move < 0:
            raise ValueError("step counts must be nonnegative")
        if self.resampling not in ("systematic", "multinomial"):
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")


@dataclass(frozen=True)
class Particle:
    lam: np.ndarray
    phi: float
    x: np.ndarray
    log_weight: float = 0.0


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-epoch posterior functionals of the route volumes.

    ``accept`` holds the move-step acceptance rates of ``lam``, ``phi`` and
    ``x`` (columns in that order); ``restarts`` counts epoch retries.
    """

    mean: np.ndarray
    median: np.ndarray
    q05: np.ndarray
    q95: np.ndarray
    ess: np.ndarray
    accept: np.ndarray
    restarts: np.ndarray
    low_ess: np.ndarray
    lam_mean: np.ndarray
    phi_mean: np.ndarray
    particles: dict | None = field(default=None, repr=False)

    @property
    def T(self):
        return self.mean.shape[0]


# -- densities ----------------------------------------------------------------

def truncnorm_logpdf(x, mean, var):
    """Log density of ``N(mean, var)`` truncated to ``(0, inf)``.

    The normaliser ``log P(Z > -mean/sd)`` goes through ``log_ndtr`` and
    stays finite far into the lower tail.  Returns ``-inf`` for ``x < 0``.
    """
    x, mean, var = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, mean, var)))
    sd = np.sqrt(var)
    out = -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var - log_ndtr(mean / sd)
    out = np.where(x < 0, -np.inf, out)
    return out if out.ndim else float(out)


def truncnorm_draw(mean, var, rng=None):
    """Draws from ``N(mean, var)`` truncated to ``(0, inf)``."""
    rng = np.random.default_rng(rng)
    mean = np.asarray(mean, dtype=float)
    sd = np.sqrt(np.asarray(var, dtype=float))
    a = -mean / sd
    return truncnorm.rvs(a, np.inf, loc=mean, scale=sd, random_state=rng)


def _log_expm1(phi):
    phi = np.asarray(phi, dtype=float)
    big = phi > 30.0
    small = np.log(np.expm1(np.where(big, 1.0, phi)))
    return np.where(big, phi + np.log1p(-np.exp(-np.where(big, phi, 30.0))), small)


def _noise_var(log_lam, phi, tau):
    # lam**tau * (exp(phi) - 1), computed in logs; phi broadcasts over routes
    with np.errstate(over="ignore"):
        return np.exp(tau * log_lam + _log_expm1(phi))


def _route_loglik(x, log_lam, phi, tau):
    return truncnorm_logpdf(x, np.exp(log_lam), _noise_var(log_lam, phi, tau))


def _gamma_logpdf(phi, alpha, beta):
    # shape alpha, scale beta / alpha, up to a constant
    return (alpha - 1) * np.log(phi) - alpha * phi / beta


# -- simulation ---------------------------------------------------------------

def simulate(priors: PriorSchedule, lambda0, A, T=None, phi_fixed=None, rng=None):
    """Draw ``(lam, x, y)`` from the multilevel model.

    ``lambda0`` is the intensity before the first epoch.  ``phi_fixed``
    replaces the Gamma draws of ``phi`` by a constant.
    """
    rng = np.random.default_rng(rng)
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    T = priors.T if T is None else int(T)
    if T > priors.T:
        raise ValueError("prior schedule is shorter than T")
    lam0 = np.asarray(lambda0, dtype=float)
    if np.any(lam0 <= 0) or lam0.shape != (priors.n,):
        raise ValueError("lambda0 must be a positive vector of length n")
    if a.shape[1] != priors.n:
        raise ValueError("routing matrix and priors disagree on n")
    n = priors.n
    log_lam = np.empty((T, n))
    prev = np.log(lam0)
    for t in range(T):
        prev = priors.rho * prev + priors.theta1[t] + np.sqrt(priors.theta2[t]) * rng.standard_normal(n)
        log_lam[t] = prev
    if phi_fixed is None:
        phi = rng.gamma(priors.alpha, priors.beta[:T] / priors.alpha)
    else:
        phi = np.full(T, float(phi_fixed))
    lam = np.exp(log_lam)
    var = _noise_var(log_lam, phi[:, None], priors.tau)
    x = np.asarray(truncnorm_draw(lam, var, rng)).reshape(T, n)
    return lam, x, aggregate(a, x)


# -- weights and resampling ----------------------------------------------------

def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    top = w.max(initial=0.0)
    if top <= 0:
        return 0.0
    w = w / top  # guards against underflow of w**2
    return float(np.sum(w) ** 2 / np.sum(w ** 2))


def _normalise(log_w):
    finite = np.isfinite(log_w)
    if not finite.any():
        return None
    w = np.exp(np.where(finite, log_w - log_w[finite].max(), -np.inf))
    return w / w.sum()


def resample(weights, rng, scheme="systematic"):
    """Ancestor indices drawn proportionally to ``weights``."""
    w = np.asarray(weights, dtype=float)
    J = w.size
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    if scheme == "systematic":
        u = (rng.random() + np.arange(J)) / J
    elif scheme == "multinomial":
        u = rng.random(J)
    else:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), J - 1)


def importance_log_weights(x, log_lam, phi, tau, mu, prop_var):
    """Model density of each proposal over the shared proposal density.

    Both are products over routes; the proposal's polytope normaliser is
    common to all particles and is dropped.
    """
    model = _route_loglik(x, log_lam, phi[:, None], tau).sum(axis=1)
    prop = -0.5 * np.sum((x - mu) ** 2 / prop_var, axis=1)
    return model - prop


# -- filter ----------------------------------------------------------------------

class _Scales:
    def __init__(self, n):
        self.lam = np.full(n, 0.5)
        self.phi = PHI_STEP

    def adapt(self, rate_lam, rate_phi):
        lo, hi = TARGET_ACCEPT
        self.lam = np.where(rate_lam < lo, self.lam * 0.8,
                            np.where(rate_lam > hi, self.lam * 1.25, self.lam))
        self.lam = np.clip(self.lam, 1e-3, 10.0)
        if rate_phi < lo:
            self.phi *= 0.8
        elif rate_phi > hi:
            self.phi *= 1.25
        self.phi = float(np.clip(self.phi, 1e-3, 5.0))


def _draw_proposals(P, mu, prop_var, J, steps, rng):
    x0 = feasible_point(P, seed=mu)
    X = np.repeat(x0[None, :], J, axis=0)
    if P.dim == 0 or steps == 0:
        return X

    def logf(Z):
        return -0.5 * np.sum((Z - mu) ** 2 / prop_var, axis=1)

    lf = logf(X)
    for _ in range(steps):
        X, _, lf = _rda(P, X, logf, rng, lf)
    return X


def _move(P, X, log_lam, phi, prior_mean, t2, beta, priors, scales, cfg, rng):
    J, n = X.shape
    tau, alpha = priors.tau, priors.alpha
    rate_lam = np.zeros(n)
    rate = np.zeros(2)
    sd_lam = scales.lam * np.sqrt(t2)
    ll = _route_loglik(X, log_lam, phi[:, None], tau)
    for _ in range(cfg.n_move):
        # intensities: every route is its own Metropolis update
        prop = np.clip(log_lam + sd_lam * rng.standard_normal((J, n)), -LOG_LAM_CLIP, LOG_LAM_CLIP)
        ll_new = _route_loglik(X, prop, phi[:, None], tau)
        delta = ll_new - ll - 0.5 * ((prop - prior_mean) ** 2 - (log_lam - prior_mean) ** 2) / t2
        ok = np.log(rng.random((J, n))) < delta
        log_lam = np.where(ok, prop, log_lam)
        ll = np.where(ok, ll_new, ll)
        rate_lam += ok.mean(axis=0)

        # common scale, random walk on log phi
        phi_new = phi * np.exp(scales.phi * rng.standard_normal(J))
        ll_phi = _route_loglik(X, log_lam, phi_new[:, None], tau)
        delta = (ll_phi.sum(axis=1) - ll.sum(axis=1)
                 + _gamma_logpdf(phi_new, alpha, beta) - _gamma_logpdf(phi, alpha, beta)
                 + np.log(phi_new / phi))
        delta = np.where(phi_new > PHI_MAX, -np.inf, delta)
        ok = np.log(rng.random(J)) < delta
        phi = np.where(ok, phi_new, phi)
        ll = np.where(ok[:, None], ll_phi, ll)
        rate[0] += ok.mean()

        # route volumes on the polytope
        if P.dim > 0 and cfg.rda_steps_per_move > 0:
            lam = np.exp(log_lam)
            var = _noise_var(log_lam, phi[:, None], tau)

            def logf(Z):
                return -0.5 * np.sum((Z - lam) ** 2 / var, axis=1)

            lf = logf(X)
            for _ in range(cfg.rda_steps_per_move):
                X, ok, lf = _rda(P, X, logf, rng, lf)
                rate[1] += ok.mean() / cfg.rda_steps_per_move
            ll = _route_loglik(X, log_lam, phi[:, None], tau)
        else:
            rate[1] += 1.0
    k = max(cfg.n_move, 1)
    return X, log_lam, phi, rate_lam / k, rate / k


def _initial_log_lam(P, J, rng):
    x0 = feasible_point(P)
    floor = max(1e-6 * float(np.mean(P.y)), 1e-12) if P.y.size else 1e-12
    return np.log(np.maximum(x0, floor)) + INIT_LOG_SD * rng.standard_normal((J, x0.size))


def sirm_filter(y, A: RoutingMatrix, priors: PriorSchedule, cfg: FilterConfig | None = None,
                lambda0=None) -> PosteriorSummary:
    """Sample-importance-resample-move filter over the epochs of ``y``.

    At each epoch every particle proposes ``log lam* ~ N(theta1 + rho log
    lam_prev, theta2)`` and ``phi ~ Gamma(alpha, beta / alpha)``, and draws
    ``x*`` by random-directions steps from a truncated normal that is shared
    by the whole ensemble, centred at ``rho`` times the ensemble mean of the
    previous intensities with variance ``(exp(beta) - 1) mu**2``.  Weights
    are the model density of ``x*`` over the proposal density.  After
    resampling, ``n_move`` Metropolis-within-Gibbs sweeps refresh ``lam``,
    ``phi`` and ``x``.

    Parameters
    ----------
    y : (T, m) array
    A : RoutingMatrix
    priors : PriorSchedule
        Must cover at least ``T`` epochs of the ``n`` routes.
    cfg : FilterConfig, optional
    lambda0 : (n,) array, optional
        Centre of the log-normal cloud of initial intensities.  Defaults to
        a feasible point of the first epoch.

    Returns
    -------
    PosteriorSummary
    """
    cfg = cfg or FilterConfig()
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T, m = y.shape
    n = A.n
    if m != A.m:
        raise ValueError(f"y has {m} counters, routing matrix has {A.m}")
    if priors.n != n or priors.T < T:
        raise ValueError("prior schedule does not cover (T, n)")
    rng = np.random.default_rng(cfg.seed)
    J = cfg.n_particles
    rho, tau, alpha = priors.rho, priors.tau, priors.alpha
    scales = _Scales(n)

    out = {k: np.empty((T, n)) for k in ("mean", "median", "q05", "q95", "lam_mean")}
    ess_t = np.empty(T)
    accept = np.empty((T, 3))
    restarts = np.zeros(T, dtype=int)
    phi_mean = np.empty(T)
    keep = {"lam": [], "phi": [], "x": [], "log_weight": []} if cfg.keep_particles else None

    log_prev = None
    for t in range(T):
        P = Polytope(A, y[t])
        if log_prev is None:
            if lambda0 is None:
                log_prev = _initial_log_lam(P, J, rng)
            else:
                lam0 = np.asarray(lambda0, dtype=float)
                log_prev = np.log(lam0) + INIT_LOG_SD * rng.standard_normal((J, n))
        t1, t2, beta = priors.theta1[t], priors.theta2[t], priors.beta[t]
        mu = np.maximum(rho * np.exp(log_prev).mean(axis=0), 1e-300)
        prop_var = np.expm1(beta) * mu ** 2
        steps = cfg.rda_steps_per_draw
        for attempt in range(cfg.max_restarts + 1):
            log_lam = np.clip(t1 + rho * log_prev + np.sqrt(t2) * rng.standard_normal((J, n)),
                              -LOG_LAM_CLIP, LOG_LAM_CLIP)
            phi = rng.gamma(alpha, beta / alpha, J)
            X = _draw_proposals(P, mu, prop_var, J, steps, rng)
            log_w = importance_log_weights(X, log_lam, phi, tau, mu, prop_var)
            w = _normalise(log_w)
            if w is not None:
                break
            restarts[t] += 1
            steps = max(2 * steps, 1)
            log.warning("all weights vanished at epoch %d; retrying with %d steps", t, steps)
        else:
            raise DegenerateEnsemble(f"all importance weights vanished at epoch {t}", epoch=t)
        ess_t[t] = ess(w)
        idx = resample(w, rng, cfg.resampling)
        X, log_lam, phi = X[idx], log_lam[idx], phi[idx]
        prior_mean = t1 + rho * log_prev[idx]
        X, log_lam, phi, rate_lam, rate = _move(P, X, log_lam, phi, prior_mean, t2, beta,
                                                priors, scales, cfg, rng)
        if cfg.adapt and cfg.n_move:
            scales.adapt(rate_lam, rate[0])
        accept[t] = rate_lam.mean(), rate[0], rate[1]

        q = np.quantile(X, [0.05, 0.5, 0.95], axis=0)
        out["mean"][t] = X.mean(axis=0)
        out["q05"][t], out["median"][t], out["q95"][t] = q
        out["lam_mean"][t] = np.exp(log_lam).mean(axis=0)
        phi_mean[t] = phi.mean()
        if keep is not None:
            keep["lam"].append(np.exp(log_lam))
            keep["phi"].append(phi)
            keep["x"].append(X)
            keep["log_weight"].append(log_w[idx])
        log_prev = log_lam

    particles = {k: np.stack(v) for k, v in keep.items()} if keep is not None else None
    return PosteriorSummary(
        mean=out["mean"], median=out["median"], q05=out["q05"], q95=out["q95"],
        ess=ess_t, accept=accept, restarts=restarts,
        low_ess=ess_t < cfg.ess_threshold * J,
        lam_mean=out["lam_mean"], phi_mean=phi_mean, particles=particles,
    )


# -- export ----------------------------------------------------------------------

def write_estimates_csv(summary: PosteriorSummary, path, route_names=None) -> None:
    """Long format ``t, route, mean, median, q05, q95``."""
    n = summary.mean.shape[1]
    names = route_names or [str(j) for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "route", "mean", "median", "q05", "q95"])
        for t in range(summary.T):
            for j in range(n):
                w.writerow([t, names[j], float(summary.mean[t, j]), float(summary.median[t, j]),
                            float(summary.q05[t, j]), float(summary.q95[t, j])])


def write_diagnostics_csv(summary: PosteriorSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "ess", "accept_lambda", "accept_phi", "accept_x", "restarts",
                    "low_ess", "phi_mean"])
        for t in range(summary.T):
            a = summary.accept[t]
            w.writerow([t, float(summary.ess[t]), float(a[0]), float(a[1]), float(a[2]),
                        int(summary.restarts[t]), int(summary.low_ess[t]), float(summary.phi_mean[t])])


def dump_particles(summary: PosteriorSummary, path) -> None:
    """Write the kept ensembles to a compressed ``.npz``.

    Arrays: ``lam`` and ``x`` of shape ``(T, J, n)``, ``phi`` and
    ``log_weight`` of shape ``(T, J)`` (post-move ensembles with the
    importance weights they were resampled by), and ``ess`` of shape ``(T,)``.
    """
    if summary.particles is None:
        raise ValueError("run the filter with keep_particles=True to dump particles")
    np.savez_compressed(path, ess=summary.ess, **summary.particles)


def load_particles(path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}
