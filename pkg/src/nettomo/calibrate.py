"""Prior schedules for the multilevel model, built from first-stage estimates."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .errors import InfeasibleError, NonConvergence
from .network import RoutingMatrix
from .polytope import ipfp

log = logging.getLogger(__name__)

__all__ = [
    "PriorSchedule",
    "correct",
    "correct_and_smooth",
    "priors_from_ssm",
    "priors_from_gravity",
    "naive_priors",
    "write_priors_csv",
    "read_priors_csv",
]

NAIVE_THETA2 = np.log(5.0) / 2
DEFAULT_BETA = 1.5
THETA2_FLOOR = 1e-4
EPS_REL = 1e-6


@dataclass(frozen=True)
class PriorSchedule:
    """Constants of the multilevel model for every epoch.

    ``theta1[t, j]`` and ``theta2[t, j]`` are the mean and variance of the
    log-intensity innovation of route ``j``; ``phi_t ~ Gamma(alpha,
    beta[t] / alpha)``.
    """

    theta1: np.ndarray
    theta2: np.ndarray
    beta: np.ndarray
    alpha: float
    rho: float = 0.9
    tau: float = 2.0

    def __post_init__(self):
        t1 = np.atleast_2d(np.asarray(self.theta1, dtype=float))
        t2 = np.atleast_2d(np.asarray(self.theta2, dtype=float))
        beta = np.asarray(self.beta, dtype=float)
        if t1.shape != t2.shape or beta.shape != (t1.shape[0],):
            raise ValueError("theta1, theta2 and beta disagree on (T, n)")
        if np.any(t2 <= 0) or np.any(beta <= 0) or not self.alpha > 0:
            raise ValueError("theta2, beta and alpha must be positive")
        for name, val in (("theta1", t1), ("theta2", t2), ("beta", beta)):
            object.__setattr__(self, name, val)

    @property
    def T(self):
        return self.theta1.shape[0]

    @property
    def n(self):
        return self.theta1.shape[1]


def _theta1(x, rho):
    lx = np.log(x)
    t1 = np.empty_like(lx)
    t1[0] = (1 - rho) * lx[0]
    t1[1:] = lx[1:] - rho * lx[:-1]
    return t1


def correct(x_raw, A, y, eps=None):
    """Project each epoch onto its polytope by IPFP.

    Returns ``(x, flags)``; ``flags[t]`` is True where IPFP failed and the
    epoch was filled from its neighbours.
    """
    a = A.entries if isinstance(A, RoutingMatrix) else np.asarray(A, dtype=float)
    x_raw = np.asarray(x_raw, dtype=float)
    y = np.asarray(y, dtype=float)
    if eps is None:
        eps = EPS_REL * max(float(np.mean(y)), 1e-300)
    T = x_raw.shape[0]
    out = np.empty_like(x_raw)
    flags = np.zeros(T, dtype=bool)
    for t in range(T):
        try:
            out[t] = ipfp(a, y[t], np.maximum(x_raw[t], eps), max_iter=1000, tol=1e-10)
        except (NonConvergence, InfeasibleError) as exc:
            log.info("IPFP failed at epoch %d: %s", t, exc)
            flags[t] = True
    if flags.all():
        raise NonConvergence("IPFP failed at every epoch")
    if flags.any():
        good = np.flatnonzero(~flags)
        bad = np.flatnonzero(flags)
        for j in range(out.shape[1]):
            out[bad, j] = np.interp(bad, good, out[good, j])
    return out, flags


def correct_and_smooth(x_raw, A, y, median_window=5, eps=None):
    """IPFP-correct every epoch, then apply a running median over time.

    The output is floored at ``eps`` (default ``1e-6 * mean(y)``) so it can
    be logged.  The median step does not preserve feasibility.
    """
    if median_window % 2 == 0:
        raise ValueError("median_window must be odd")
    y = np.asarray(y, dtype=float)
    if eps is None:
        eps = EPS_REL * max(float(np.mean(y)), 1e-300)
    x, _ = correct(x_raw, A, y, eps)
    if median_window > 1:
        x = median_filter(x, size=(median_window, 1), mode="nearest")
    return np.maximum(x, eps)


def priors_from_ssm(x_hat, v_hat, phi_hat, rho=0.9, tau=2.0) -> PriorSchedule:
    """Priors from the Gaussian state-space fit.

    ``theta1`` follows the log-AR(1) increment of ``x_hat`` (the first epoch
    uses ``(1 - rho) log x_hat[0]``), ``theta2 = (1 - rho**2) log(1 + V/x**2)``
    and ``beta = log(1 + phi_hat)``.
    """
    x = np.asarray(x_hat, dtype=float)
    v = np.asarray(v_hat, dtype=float)
    if np.any(x <= 0) or np.any(v <= 0):
        raise ValueError("x_hat and v_hat must be positive")
    theta2 = (1 - rho ** 2) * np.log1p(v / x ** 2)
    theta2 = np.maximum(theta2, np.finfo(float).tiny)
    beta = np.log1p(np.asarray(phi_hat, dtype=float))
    return PriorSchedule(_theta1(x, rho), theta2, beta, x.shape[1] / 2, rho, tau)


def priors_from_gravity(x_grav, rho=0.9, tau=2.0, eps=None) -> PriorSchedule:
    x = np.asarray(x_grav, dtype=float)
    if eps is None:
        eps = EPS_REL * max(float(np.mean(x)), 1e-300)
    x = np.maximum(x, eps)
    theta1 = _theta1(x, rho)
    var = np.maximum(theta1.var(axis=0), THETA2_FLOOR)
    theta2 = np.broadcast_to(var, theta1.shape).copy()
    beta = np.full(x.shape[0], DEFAULT_BETA)
    return PriorSchedule(theta1, theta2, beta, x.shape[1] / 2, rho, tau)


def naive_priors(n, T, rho=0.9, tau=2.0) -> PriorSchedule:
    """Random-walk priors: ``theta1 = 0``, ``theta2 = log(5)/2``, ``beta = 1.5``."""
    return PriorSchedule(
        np.zeros((T, n)),
        np.full((T, n), NAIVE_THETA2),
        np.full(T, DEFAULT_BETA),
        n / 2,
        rho,
        tau,
    )


def write_priors_csv(priors: PriorSchedule, path, sidecar=None, route_names=None) -> None:
    """Long-format ``t, route, theta1, theta2`` plus a JSON sidecar of scalars."""
    names = route_names or [str(j) for j in range(priors.n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "route", "theta1", "theta2"])
        for t in range(priors.T):
            for j in range(priors.n):
                w.writerow([t, names[j], float(priors.theta1[t, j]), float(priors.theta2[t, j])])
    sidecar = sidecar or str(path) + ".json"
    with open(sidecar, "w") as fh:
        json.dump({"alpha": priors.alpha, "rho": priors.rho, "tau": priors.tau,
                   "beta": priors.beta.tolist()}, fh, indent=1)


def read_priors_csv(path, sidecar=None) -> PriorSchedule:
    sidecar = sidecar or str(path) + ".json"
    with open(sidecar) as fh:
        meta = json.load(fh)
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((int(rec["t"]), rec["route"], float(rec["theta1"]), float(rec["theta2"])))
    T = len(meta["beta"])
    routes = list(dict.fromkeys(r[1] for r in rows))
    col = {r: j for j, r in enumerate(routes)}
    t1 = np.zeros((T, len(routes)))
    t2 = np.zeros((T, len(routes)))
    for t, r, a, b in rows:
        t1[t, col[r]] = a
        t2[t, col[r]] = b
    return PriorSchedule(t1, t2, np.array(meta["beta"]), meta["alpha"], meta["rho"], meta["tau"])
