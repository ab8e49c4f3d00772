"""Gaussian autoregressive state-space model used to calibrate priors.

The latent route volumes follow

    x_t = rho * x_{t-1} + lam + e_t,     e_t ~ N(0, phi * diag(lam)**tau)
    y_t = A x_t + eps_t,                 eps_t ~ N(0, sigma2 * I)

started from the stationary law ``N(lam / (1 - rho), phi / (1 - rho**2) D)``.
Working with the centred state ``z_t = x_t - lam / (1 - rho)`` removes the
constant from the transition, so the filter only carries ``n`` states.

``rho``, ``sigma2`` and ``tau`` are fixed; ``lam`` and ``phi`` are fitted by
maximum marginal likelihood on sliding windows.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .errors import NonConvergence, NonFiniteLikelihood, OptFailed
from .network import RoutingMatrix, check_identifiability
from .polytope import ipfp

log = logging.getLogger(__name__)

__all__ = [
    "SsmParams",
    "SsmFit",
    "WindowFit",
    "simulate_ssm",
    "kalman_marginal_loglik",
    "kalman_smoother",
    "window_loglik",
    "fit_window",
    "fit_sliding",
    "write_fit_csv",
]

LOG2PI = np.log(2 * np.pi)
# Optimizer settings; none of these are prescribed by the model.
PHI_BOUNDS = (1e-8, 1e4)
LAMBDA_FLOOR_REL = 1e-6
LBFGS_OPTIONS = {"maxiter": 500, "ftol": 1e-12, "gtol": 1e-7}
WARM_RESET_LOG = np.log(1e3)


def _as_array(A):
    return A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)


@dataclass(frozen=True)
class SsmParams:
    lam: np.ndarray
    phi: float
    rho: float = 0.1
    sigma2: float = 0.01
    tau: float = 2.0

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim != 1 or np.any(lam <= 0):
            raise ValueError("lam must be a positive vector")
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be below 1")
        if not self.sigma2 > 0 or not self.tau > 0:
            raise ValueError("sigma2 and tau must be positive")
        object.__setattr__(self, "lam", lam)

    @property
    def mean(self):
        """Stationary mean of the route volumes."""
        return self.lam / (1 - self.rho)

    @property
    def noise_var(self):
        """Diagonal of the transition noise covariance."""
        return self.phi * self.lam ** self.tau

    @property
    def stationary_var(self):
        return self.noise_var / (1 - self.rho ** 2)


def simulate_ssm(params: SsmParams, A, T: int, rng=None):
    """Draw ``(x, y)`` of length ``T`` from the stationary model."""
    rng = np.random.default_rng(rng)
    a = _as_array(A)
    n = params.lam.size
    sd = np.sqrt(params.noise_var)
    x = np.empty((T, n))
    prev = params.mean + np.sqrt(params.stationary_var) * rng.standard_normal(n)
    for t in range(T):
        prev = params.rho * prev + params.lam + sd * rng.standard_normal(n)
        x[t] = prev
    y = x @ a.T + np.sqrt(params.sigma2) * rng.standard_normal((T, a.shape[0]))
    return x, y


def _innovation_solver(S, sigma2):
    """Return ``(solve, logdet)`` for ``S = A P A' + sigma2 I``.

    Exactly, every eigenvalue of ``S`` is at least ``sigma2``.  With a
    rank-deficient ``A`` and large volumes that floor can sit further below
    the top eigenvalue than double precision resolves, and the Cholesky
    factorisation breaks.  The fallback solves in the eigenbasis with the
    spectrum clipped back to the floor.
    """
    try:
        cf = linalg.cho_factor(S, lower=True)
        return (lambda b: linalg.cho_solve(cf, b)), 2.0 * np.log(np.diag(cf[0])).sum()
    except linalg.LinAlgError:
        pass
    w, u = np.linalg.eigh(0.5 * (S + S.T))
    if not np.all(np.isfinite(w)):
        raise NonFiniteLikelihood("innovation covariance is not finite")
    w = np.maximum(w, sigma2)
    solve = lambda b: u @ ((u.T @ b) / (w if np.ndim(b) == 1 else w[:, None]))  # noqa: E731
    return solve, float(np.log(w).sum())


def _filter(params, y, a):
    """Centred Kalman filter; returns per-step quantities for the smoother."""
    rho, n = params.rho, params.lam.size
    q = params.noise_var
    resid = y - a @ params.mean
    m = np.zeros(n)
    P = np.diag(params.stationary_var)
    eye_m = np.eye(a.shape[0])
    ll = 0.0
    ms, Ps, mp, Pp = [], [], [], []
    for v_obs in resid:
        m = rho * m
        P = rho * rho * P
        P[np.diag_indices(n)] += q
        mp.append(m)
        Pp.append(P)
        PAt = P @ a.T
        S = a @ PAt + params.sigma2 * eye_m
        solve, logdet = _innovation_solver(S, params.sigma2)
        v = v_obs - a @ m
        ll -= 0.5 * (logdet + v @ solve(v) + a.shape[0] * LOG2PI)
        K = solve(PAt.T).T
        m = m + K @ v
        P = P - K @ PAt.T
        P = 0.5 * (P + P.T)
        ms.append(m)
        Ps.append(P)
    if not np.isfinite(ll):
        raise NonFiniteLikelihood("log-likelihood is not finite")
    return ll, ms, Ps, mp, Pp


def kalman_marginal_loglik(params: SsmParams, y_window, A) -> float:
    """Gaussian log-likelihood of a window by the prediction-error decomposition."""
    y = np.atleast_2d(np.asarray(y_window, dtype=float))
    if y.shape[0] < 2:
        raise ValueError("window must contain at least 2 observations")
    return _filter(params, y, _as_array(A))[0]


def kalman_smoother(params: SsmParams, y_window, A):
    """Rauch-Tung-Striebel smoother.

    Returns ``(means, variances)``, both ``(w, n)``: smoothed route volumes
    (on the original, uncentred scale) and their marginal variances.
    """
    y = np.atleast_2d(np.asarray(y_window, dtype=float))
    a = _as_array(A)
    _, ms, Ps, mp, Pp = _filter(params, y, a)
    w = len(ms)
    sm, sP = [None] * w, [None] * w
    sm[-1], sP[-1] = ms[-1], Ps[-1]
    for t in range(w - 2, -1, -1):
        G = linalg.solve(Pp[t + 1], params.rho * Ps[t], assume_a="pos").T
        sm[t] = ms[t] + G @ (sm[t + 1] - mp[t + 1])
        sP[t] = Ps[t] + G @ (sP[t + 1] - Pp[t + 1]) @ G.T
    means = np.array(sm) + params.mean
    var = np.array([np.diag(P) for P in sP])
    return means, np.maximum(var, 0.0)


class _WindowObjective:
    """Window log-likelihood in closed form, with its gradient.

    Under stationarity the stacked window has covariance
    ``kron(R, M) + sigma2 I`` with ``R[t, s] = rho**|t-s|`` and
    ``M = phi / (1 - rho**2) A D A'``, so both factors are diagonalised
    separately.  Parameters are ``theta = (log lam, log phi)``.
    """

    def __init__(self, y, a, rho, sigma2, tau):
        self.y = np.asarray(y, dtype=float)
        self.a = a
        self.rho, self.sigma2, self.tau = rho, sigma2, tau
        w = self.y.shape[0]
        lags = np.abs(np.subtract.outer(np.arange(w), np.arange(w)))
        self.ev_r, self.u = np.linalg.eigh(rho ** lags)
        self.ev_r = np.maximum(self.ev_r, 0.0)
        self.const = -0.5 * self.y.size * LOG2PI

    def __call__(self, theta):
        a, rho, tau = self.a, self.rho, self.tau
        n = a.shape[1]
        lam = np.exp(theta[:n])
        phi = np.exp(theta[n])
        c = phi / (1 - rho ** 2)
        D = lam ** tau
        M0 = (a * D) @ a.T
        ev_m, V = np.linalg.eigh(c * M0)
        ev_m = np.maximum(ev_m, 0.0)
        mu = lam / (1 - rho)
        r = self.y - a @ mu
        yt = self.u.T @ r @ V
        E = np.outer(self.ev_r, ev_m) + self.sigma2
        Z = yt / E
        ll = self.const - 0.5 * np.sum(np.log(E) + yt * Z)

        alpha = self.u @ Z @ V.T
        inner = Z.T @ (self.ev_r[:, None] * Z) - np.diag((self.ev_r[:, None] / E).sum(axis=0))
        G = 0.5 * V @ inner @ V.T
        g_mu = a.T @ alpha.sum(axis=0)
        g_D = c * np.einsum("ij,ik,kj->j", a, G, a)
        g_loglam = lam * (g_mu / (1 - rho) + g_D * tau * lam ** (tau - 1))
        g_logphi = np.sum(G * (c * M0))
        return ll, np.append(g_loglam, g_logphi)


def window_loglik(params: SsmParams, y_window, A) -> float:
    """Same value as :func:`kalman_marginal_loglik`, evaluated in closed form."""
    obj = _WindowObjective(y_window, _as_array(A), params.rho, params.sigma2, params.tau)
    return obj(np.append(np.log(params.lam), np.log(params.phi)))[0]


@dataclass(frozen=True)
class WindowFit:
    params: SsmParams
    loglik: float
    converged: bool
    at_bound: bool = False


def _initial_theta(y, a, rho, tau, floor, x_init=None):
    ybar = np.maximum(y.mean(axis=0), 0.0)
    n = a.shape[1]
    if x_init is None:
        try:
            x_init = ipfp(a, ybar, np.ones(n), max_iter=200, tol=1e-8)
        except NonConvergence as exc:
            x_init = exc.x
        except Exception:
            x_init = np.full(n, max(ybar.sum(), floor) / n)
    lam0 = np.maximum((1 - rho) * np.asarray(x_init, dtype=float), floor)
    var = y.var(axis=0)
    diag_m = (a * lam0 ** tau) @ a.T
    denom = np.trace(diag_m)
    phi0 = (1 - rho ** 2) * var.sum() / denom if denom > 0 else 1.0
    phi0 = float(np.clip(phi0, 1e-4, 1e2))
    return np.append(np.log(lam0), np.log(phi0))


def _bounds(y, n, floor):
    top = max(10.0 * float(np.abs(y).max()), 10.0 * floor)
    lam_b = [(np.log(floor), np.log(top))] * n
    return lam_b + [tuple(np.log(PHI_BOUNDS))]


_IDENT_CACHE: dict = {}


def _warn_identifiability(a):
    key = (a.shape, a.tobytes())
    if key not in _IDENT_CACHE:
        _IDENT_CACHE[key] = check_identifiability(a)
        if not _IDENT_CACHE[key]:
            warnings.warn("routing matrix fails the identifiability condition; "
                          "window fits may be arbitrary along unidentified directions",
                          stacklevel=3)


def fit_window(y_window, A, rho=0.1, sigma2=0.01, tau=2.0, init=None, x_init=None) -> WindowFit:
    """Maximum-likelihood ``(lam, phi)`` for one window.

    ``init`` is a starting ``theta = (log lam, log phi)`` (e.g. the previous
    window's optimum); otherwise the start is a gravity-like estimate of the
    mean traffic (IPFP from a uniform seed, or ``x_init``) scaled by
    ``1 - rho``.  Raises :class:`OptFailed` if no finite optimum is found.
    """
    y = np.atleast_2d(np.asarray(y_window, dtype=float))
    a = _as_array(A)
    n = a.shape[1]
    _warn_identifiability(a)
    scale = float(np.mean(y)) if y.size else 0.0
    if scale <= 0:
        floor = 1e-12
        params = SsmParams(np.full(n, floor), PHI_BOUNDS[0], rho, sigma2, tau)
        ll = window_loglik(params, y, a)
        return WindowFit(params, ll, converged=False, at_bound=True)
    floor = LAMBDA_FLOOR_REL * scale
    bounds = _bounds(y, n, floor)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    cold = _initial_theta(y, a, rho, tau, floor, x_init)
    if init is None:
        theta0 = cold
    else:
        # A route driven to the floor has a vanishing log-scale gradient and
        # would stay there for every later window; restart such routes cold.
        theta0 = np.array(init, dtype=float)
        stuck = theta0[:n] < lo[:n] + WARM_RESET_LOG
        theta0[:n][stuck] = cold[:n][stuck]
    theta0 = np.clip(theta0, lo, hi)
    obj = _WindowObjective(y, a, rho, sigma2, tau)

    def neg(theta):
        ll, g = obj(theta)
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(theta)
        return -ll, -g

    res = minimize(neg, theta0, jac=True, method="L-BFGS-B", bounds=bounds, options=LBFGS_OPTIONS)
    theta = res.x
    if not np.all(np.isfinite(theta)) or not np.isfinite(res.fun) or res.fun >= 1e300:
        best = SsmParams(np.exp(theta0[:n]), float(np.exp(theta0[n])), rho, sigma2, tau)
        raise OptFailed(f"window fit failed: {res.message}", best=best)
    params = SsmParams(np.exp(theta[:n]), float(np.exp(theta[n])), rho, sigma2, tau)
    at_bound = bool(np.any(np.isclose(theta, lo, atol=1e-8)) or np.isclose(theta[n], hi[n]))
    return WindowFit(params, float(-res.fun), bool(res.success), at_bound)


@dataclass(frozen=True)
class SsmFit:
    """Sliding-window fit; every per-time array is indexed by epoch."""

    x_hat: np.ndarray
    v_hat: np.ndarray
    phi_hat: np.ndarray
    lam_hat: np.ndarray
    window: int
    loglik: np.ndarray
    gaps: tuple = field(default=())


def _fit_one(args):
    y, a, rho, sigma2, tau = args
    try:
        return fit_window(y, a, rho, sigma2, tau)
    except OptFailed as exc:
        return exc


def _interp_log(values, good):
    # Fill rows where ``good`` is False by linear interpolation in log space.
    T = values.shape[0]
    t = np.arange(T)
    out = values.copy()
    logs = np.log(np.maximum(values, 1e-300))
    flat = out.reshape(T, -1)
    lflat = logs.reshape(T, -1)
    for j in range(flat.shape[1]):
        flat[~good, j] = np.exp(np.interp(t[~good], t[good], lflat[good, j]))
    return out


def fit_sliding(y, A, window=23, rho=0.1, sigma2=0.01, tau=2.0, n_jobs=1) -> SsmFit:
    """Fit every window of width ``window`` (stride 1) and smooth.

    Each window's estimates are attached to its centre epoch; the first and
    last half-windows take the smoothed values of the nearest complete
    window.  Sequential fitting warm-starts from the previous optimum;
    ``n_jobs > 1`` fits windows in worker processes from cold starts.
    Failed windows are listed in ``gaps`` and filled by interpolating log
    estimates over time.
    """
    y = np.asarray(y, dtype=float)
    a = _as_array(A)
    T, n = y.shape[0], a.shape[1]
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be an odd integer >= 3")
    if T < window:
        raise ValueError(f"need at least {window} epochs, got {T}")
    K = T - window + 1
    half = window // 2

    if n_jobs and n_jobs > 1:
        jobs = [(y[k:k + window], a, rho, sigma2, tau) for k in range(K)]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            fits = list(pool.map(_fit_one, jobs, chunksize=max(1, K // (4 * n_jobs))))
    else:
        fits, theta = [], None
        for k in range(K):
            try:
                f = fit_window(y[k:k + window], a, rho, sigma2, tau, init=theta)
                theta = np.append(np.log(f.params.lam), np.log(f.params.phi))
            except OptFailed as exc:
                log.warning("window %d failed: %s", k, exc)
                f = exc
            fits.append(f)

    x_hat = np.zeros((T, n))
    v_hat = np.zeros((T, n))
    phi_hat = np.zeros(T)
    lam_hat = np.zeros((T, n))
    loglik = np.full(K, np.nan)
    good = np.ones(T, dtype=bool)
    gaps = []
    for k, f in enumerate(fits):
        times = range(0 if k == 0 else k + half, T if k == K - 1 else k + half + 1)
        if isinstance(f, OptFailed):
            gaps.append(k)
            for t in times:
                good[t] = False
            continue
        loglik[k] = f.loglik
        means, var = kalman_smoother(f.params, y[k:k + window], a)
        for t in times:
            x_hat[t] = means[t - k]
            v_hat[t] = var[t - k]
            phi_hat[t] = f.params.phi
            lam_hat[t] = f.params.lam
    if not good.any():
        raise OptFailed("every window fit failed")
    if gaps:
        x_hat = _interp_log(x_hat, good)
        v_hat = _interp_log(v_hat, good)
        phi_hat = _interp_log(phi_hat, good)
        lam_hat = _interp_log(lam_hat, good)
    return SsmFit(x_hat, v_hat, phi_hat, lam_hat, window, loglik, tuple(gaps))


def write_fit_csv(fit: SsmFit, path, route_names=None) -> None:
    """Long-format export: ``t, route, x_hat, v_hat, phi_hat``."""
    T, n = fit.x_hat.shape
    names = route_names or [str(j) for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "route", "x_hat", "v_hat", "phi_hat"])
        for t in range(T):
            for j in range(n):
                w.writerow([t, names[j], float(fit.x_hat[t, j]), float(fit.v_hat[t, j]),
                            float(fit.phi_hat[t])])
